//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every value is a dense row-major matrix. The backward pass is itself
//! recorded on the tape: adjoints are ordinary [`Var`]s, so a gradient can be
//! fed into further operations and differentiated again (reverse-over-reverse).
//! The synthetic-feature compressor relies on this to differentiate a cosine
//! between a model gradient and a target with respect to the model inputs.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { rows: 1, cols: 1 };

    pub fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: usize,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, Copy)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, T),
    Mul(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Sqrt(usize),
    Recip(usize),
    Abs(usize),
    SumAll(usize),
    Broadcast(usize),
    RowSum(usize),
    RepeatCols(usize),
    ColSum(usize),
    RepeatRows(usize),
    LogSumExpRows(usize),
    SoftmaxRows(usize),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Vec<T>,
    shape: Shape,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of executed primitives.
///
/// Nodes are stored in execution order, so every operand precedes its
/// consumer. A tape is single-threaded; it may be moved across threads but
/// holds no shared state.
#[derive(Debug)]
pub struct Tape<T: Scalar> {
    id: usize,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar { index: v.index });
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Vec<T>, shape: Shape, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.len());
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    fn leaf(&mut self, value: Vec<T>, shape: Shape, requires_grad: bool) -> Result<Var> {
        if value.len() != shape.len() {
            return Err(self.shape_err(
                "leaf",
                format!("{} values for shape {}x{}", value.len(), shape.rows, shape.cols),
            ));
        }
        Ok(self.push(value, shape, Op::Leaf, requires_grad))
    }

    /// Differentiable input.
    pub fn var(&mut self, value: Vec<T>, rows: usize, cols: usize) -> Result<Var> {
        self.leaf(value, Shape::new(rows, cols), true)
    }

    /// Input that never needs a gradient.
    pub fn constant(&mut self, value: Vec<T>, rows: usize, cols: usize) -> Result<Var> {
        self.leaf(value, Shape::new(rows, cols), false)
    }

    pub fn scalar_constant(&mut self, x: T) -> Var {
        self.push(vec![x], Shape::SCALAR, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.index].shape
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.index].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn rg(&self, a: usize) -> bool {
        self.nodes[a].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<Shape> {
        let (sa, sb) = (self.nodes[a].shape, self.nodes[b].shape);
        if sa != sb {
            return Err(self.shape_err(
                op,
                format!("{}x{} vs {}x{}", sa.rows, sa.cols, sb.rows, sb.cols),
            ));
        }
        Ok(sa)
    }

    fn zip_with(&mut self, op: Op<T>, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let shape = self.same_shape(name, a, b)?;
        let value = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, shape, op, rg))
    }

    fn map(&mut self, a: Var, op: impl Fn(usize) -> Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let a = self.check(a)?;
        let node = &self.nodes[a];
        let value = node.value.iter().map(|x| f(*x)).collect();
        let (shape, rg) = (node.shape, node.requires_grad);
        Ok(self.push(value, shape, op(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::Add(a.index, b.index);
        self.zip_with(op, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::Sub(a.index, b.index);
        self.zip_with(op, "sub", a, b, |x, y| x - y)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::Mul(a.index, b.index);
        self.zip_with(op, "mul", a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.map(a, |i| Op::Scale(i, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Tanh, |x| x.tanh())
    }

    /// Rectifier; its derivative at 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp, |x| x.exp())
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sqrt, |x| x.sqrt())
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Recip, |x| x.recip())
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Abs, |x| x.abs())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].shape, self.nodes[ib].shape);
        if sa.cols != sb.rows {
            return Err(self.shape_err(
                "matmul",
                format!("{}x{} times {}x{}", sa.rows, sa.cols, sb.rows, sb.cols),
            ));
        }
        let (m, k, n) = (sa.rows, sa.cols, sb.cols);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == T::zero() {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, y) in row.iter_mut().zip(brow) {
                    *o += x * *y;
                }
            }
        }
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Shape::new(m, n), Op::MatMul(ia, ib), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].shape;
        let v = &self.nodes[ia].value;
        let mut out = vec![T::zero(); s.len()];
        for r in 0..s.rows {
            for c in 0..s.cols {
                out[c * s.rows + r] = v[r * s.cols + c];
            }
        }
        let rg = self.rg(ia);
        Ok(self.push(out, Shape::new(s.cols, s.rows), Op::Transpose(ia), rg))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let mut acc = T::zero();
        for x in &self.nodes[ia].value {
            acc += *x;
        }
        let rg = self.rg(ia);
        Ok(self.push(vec![acc], Shape::SCALAR, Op::SumAll(ia), rg))
    }

    /// Fills a `rows x cols` matrix with a 1x1 node's value.
    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let ia = self.check(a)?;
        if !self.nodes[ia].shape.is_scalar() {
            let s = self.nodes[ia].shape;
            return Err(self.shape_err("broadcast", format!("source is {}x{}", s.rows, s.cols)));
        }
        let x = self.nodes[ia].value[0];
        let rg = self.rg(ia);
        Ok(self.push(vec![x; rows * cols], Shape::new(rows, cols), Op::Broadcast(ia), rg))
    }

    /// `m x n` to `m x 1` by summing each row.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].shape;
        let v = &self.nodes[ia].value;
        let out = (0..s.rows)
            .map(|r| {
                let mut acc = T::zero();
                for x in &v[r * s.cols..(r + 1) * s.cols] {
                    acc += *x;
                }
                acc
            })
            .collect();
        let rg = self.rg(ia);
        Ok(self.push(out, Shape::new(s.rows, 1), Op::RowSum(ia), rg))
    }

    /// `m x 1` to `m x n` by repeating the column.
    pub fn repeat_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].shape;
        if s.cols != 1 {
            return Err(self.shape_err("repeat_cols", format!("source is {}x{}", s.rows, s.cols)));
        }
        let v = &self.nodes[ia].value;
        let mut out = Vec::with_capacity(s.rows * n);
        for x in v {
            out.extend(std::iter::repeat_n(*x, n));
        }
        let rg = self.rg(ia);
        Ok(self.push(out, Shape::new(s.rows, n), Op::RepeatCols(ia), rg))
    }

    /// `m x n` to `1 x n` by summing each column.
    pub fn col_sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].shape;
        let v = &self.nodes[ia].value;
        let mut out = vec![T::zero(); s.cols];
        for r in 0..s.rows {
            for (o, x) in out.iter_mut().zip(&v[r * s.cols..(r + 1) * s.cols]) {
                *o += *x;
            }
        }
        let rg = self.rg(ia);
        Ok(self.push(out, Shape::new(1, s.cols), Op::ColSum(ia), rg))
    }

    /// `1 x n` to `m x n` by repeating the row.
    pub fn repeat_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].shape;
        if s.rows != 1 {
            return Err(self.shape_err("repeat_rows", format!("source is {}x{}", s.rows, s.cols)));
        }
        let v = &self.nodes[ia].value;
        let mut out = Vec::with_capacity(m * s.cols);
        for _ in 0..m {
            out.extend_from_slice(v);
        }
        let rg = self.rg(ia);
        Ok(self.push(out, Shape::new(m, s.cols), Op::RepeatRows(ia), rg))
    }

    /// Row-wise log-sum-exp, `m x n` to `m x 1`.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].shape;
        if s.cols == 0 {
            return Err(self.shape_err("log_sum_exp", "zero columns".into()));
        }
        let v = &self.nodes[ia].value;
        let out = (0..s.rows)
            .map(|r| {
                let row = &v[r * s.cols..(r + 1) * s.cols];
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut acc = T::zero();
                for x in row {
                    acc += (*x - mx).exp();
                }
                mx + acc.ln()
            })
            .collect();
        let rg = self.rg(ia);
        Ok(self.push(out, Shape::new(s.rows, 1), Op::LogSumExpRows(ia), rg))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].shape;
        let v = &self.nodes[ia].value;
        let mut out = Vec::with_capacity(s.len());
        for r in 0..s.rows {
            let row = &v[r * s.cols..(r + 1) * s.cols];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut acc = T::zero();
            for x in row {
                let e = (*x - mx).exp();
                acc += e;
                out.push(e);
            }
            for o in &mut out[start..] {
                *o = *o / acc;
            }
        }
        let rg = self.rg(ia);
        Ok(self.push(out, s, Op::SoftmaxRows(ia), rg))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    pub fn l2_norm_sq(&mut self, a: Var) -> Result<Var> {
        self.dot(a, a)
    }

    /// Mean cross-entropy between row-wise softmax of `logits` and `targets`.
    ///
    /// Targets may be soft (any real `m x C` matrix); each row contributes
    /// `sum_c y_c * (lse(z) - z_c)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Var) -> Result<Var> {
        let (il, it) = (self.check(logits)?, self.check(targets)?);
        let s = self.same_shape("softmax_cross_entropy", il, it)?;
        if s.rows == 0 {
            return Err(self.shape_err("softmax_cross_entropy", "empty batch".into()));
        }
        let lse = self.log_sum_exp(logits)?;
        let lse = self.repeat_cols(lse, s.cols)?;
        let nll = self.sub(lse, logits)?;
        let weighted = self.mul(targets, nll)?;
        let total = self.sum(weighted)?;
        self.scale(total, T::one() / T::from_usize_lossy(s.rows))
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: usize, contrib: Var) -> Result<()> {
        adj[target] = Some(match adj[target] {
            Some(prev) => self.add(prev, contrib)?,
            None => contrib,
        });
        Ok(())
    }

    fn mask(&mut self, a: usize, f: impl Fn(T) -> T) -> Var {
        let node = &self.nodes[a];
        let value = node.value.iter().map(|x| f(*x)).collect();
        let shape = node.shape;
        self.push(value, shape, Op::Leaf, false)
    }

    /// Reverse-mode gradients of a scalar `output` with respect to `wrt`.
    ///
    /// The adjoint computation is recorded on this tape, so the returned vars
    /// can themselves be differentiated. A `wrt` var that `output` does not
    /// depend on receives a zero constant.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let out = self.check(output)?;
        let s = self.nodes[out].shape;
        if !s.is_scalar() {
            return Err(Error::NonScalarOutput {
                rows: s.rows,
                cols: s.cols,
            });
        }
        let mut wanted = Vec::with_capacity(wrt.len());
        for v in wrt {
            wanted.push(self.check(*v)?);
        }

        // Nodes that lie on some path from a requested input.
        let mut live = vec![false; out + 1];
        for &w in &wanted {
            if w <= out {
                live[w] = true;
            }
        }
        for i in 0..=out {
            if live[i] {
                continue;
            }
            live[i] = match self.nodes[i].op {
                Op::Leaf => false,
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => live[a] || live[b],
                Op::Scale(a, _)
                | Op::Transpose(a)
                | Op::Tanh(a)
                | Op::Relu(a)
                | Op::Exp(a)
                | Op::Sqrt(a)
                | Op::Recip(a)
                | Op::Abs(a)
                | Op::SumAll(a)
                | Op::Broadcast(a)
                | Op::RowSum(a)
                | Op::RepeatCols(a)
                | Op::ColSum(a)
                | Op::RepeatRows(a)
                | Op::LogSumExpRows(a)
                | Op::SoftmaxRows(a) => live[a],
            };
        }

        let mut adj: Vec<Option<Var>> = vec![None; out + 1];
        if live[out] {
            adj[out] = Some(self.scalar_constant(T::one()));
        }
        let tape = self.id;
        let var = |index: usize| Var { tape, index };

        for i in (0..=out).rev() {
            if !live[i] {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op;
            let y = var(i);
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if live[a] {
                        self.accumulate(&mut adj, a, g)?;
                    }
                    if live[b] {
                        self.accumulate(&mut adj, b, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if live[a] {
                        self.accumulate(&mut adj, a, g)?;
                    }
                    if live[b] {
                        let c = self.neg(g)?;
                        self.accumulate(&mut adj, b, c)?;
                    }
                }
                Op::Scale(a, c) => {
                    let d = self.scale(g, c)?;
                    self.accumulate(&mut adj, a, d)?;
                }
                Op::Mul(a, b) => {
                    if live[a] {
                        let d = self.mul(g, var(b))?;
                        self.accumulate(&mut adj, a, d)?;
                    }
                    if live[b] {
                        let d = self.mul(g, var(a))?;
                        self.accumulate(&mut adj, b, d)?;
                    }
                }
                Op::MatMul(a, b) => {
                    if live[a] {
                        let bt = self.transpose(var(b))?;
                        let d = self.matmul(g, bt)?;
                        self.accumulate(&mut adj, a, d)?;
                    }
                    if live[b] {
                        let at = self.transpose(var(a))?;
                        let d = self.matmul(at, g)?;
                        self.accumulate(&mut adj, b, d)?;
                    }
                }
                Op::Transpose(a) => {
                    let d = self.transpose(g)?;
                    self.accumulate(&mut adj, a, d)?;
                }
                Op::Tanh(a) => {
                    // g * (1 - y^2) = g - g * y * y
                    let yy = self.mul(y, y)?;
                    let gyy = self.mul(g, yy)?;
                    let d = self.sub(g, gyy)?;
                    self.accumulate(&mut adj, a, d)?;
                }
                Op::Relu(a) => {
                    let m = self.mask(a, |x| if x > T::zero() { T::one() } else { T::zero() });
                    let d = self.mul(g, m)?;
                    self.accumulate(&mut adj, a, d)?;
                }
                Op::Exp(a) => {
                    let d = self.mul(g, y)?;
                    self.accumulate(&mut adj, a, d)?;
                }
                Op::Sqrt(a) => {
                    let r = self.recip(y)?;
                    let r = self.scale(r, T::lit(0.5))?;
                    let d = self.mul(g, r)?;
                    self.accumulate(&mut adj, a, d)?;
                }
                Op::Recip(a) => {
                    let yy = self.mul(y, y)?;
                    let gyy = self.mul(g, yy)?;
                    let d = self.neg(gyy)?;
                    self.accumulate(&mut adj, a, d)?;
                }
                Op::Abs(a) => {
                    let m = self.mask(a, |x| {
                        if x > T::zero() {
                            T::one()
                        } else if x < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        }
                    });
                    let d = self.mul(g, m)?;
                    self.accumulate(&mut adj, a, d)?;
                }
                Op::SumAll(a) => {
                    let s = self.nodes[a].shape;
                    let d = self.broadcast(g, s.rows, s.cols)?;
                    self.accumulate(&mut adj, a, d)?;
                }
                Op::Broadcast(a) => {
                    let d = self.sum(g)?;
                    self.accumulate(&mut adj, a, d)?;
                }
                Op::RowSum(a) => {
                    let n = self.nodes[a].shape.cols;
                    let d = self.repeat_cols(g, n)?;
                    self.accumulate(&mut adj, a, d)?;
                }
                Op::RepeatCols(a) => {
                    let d = self.row_sum(g)?;
                    self.accumulate(&mut adj, a, d)?;
                }
                Op::ColSum(a) => {
                    let m = self.nodes[a].shape.rows;
                    let d = self.repeat_rows(g, m)?;
                    self.accumulate(&mut adj, a, d)?;
                }
                Op::RepeatRows(a) => {
                    let d = self.col_sum(g)?;
                    self.accumulate(&mut adj, a, d)?;
                }
                Op::LogSumExpRows(a) => {
                    let n = self.nodes[a].shape.cols;
                    let sm = self.softmax(var(a))?;
                    let gr = self.repeat_cols(g, n)?;
                    let d = self.mul(gr, sm)?;
                    self.accumulate(&mut adj, a, d)?;
                }
                Op::SoftmaxRows(a) => {
                    // y * (g - rowsum(g * y))
                    let n = self.nodes[a].shape.cols;
                    let gy = self.mul(g, y)?;
                    let rs = self.row_sum(gy)?;
                    let rs = self.repeat_cols(rs, n)?;
                    let centered = self.sub(g, rs)?;
                    let d = self.mul(y, centered)?;
                    self.accumulate(&mut adj, a, d)?;
                }
            }
        }

        let mut result = Vec::with_capacity(wanted.len());
        for &w in &wanted {
            let v = match adj.get(w).copied().flatten() {
                Some(v) => v,
                None => {
                    let s = self.nodes[w].shape;
                    self.push(vec![T::zero(); s.len()], s, Op::Leaf, false)
                }
            };
            result.push(v);
        }
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_forward() {
        let mut t = Tape::<f64>::new();
        let a = t.var(vec![1.0, 2.0], 1, 2).unwrap();
        let b = t.var(vec![3.0, 4.0], 1, 2).unwrap();
        let d = t.dot(a, b).unwrap();
        assert_eq!(t.scalar(d), 11.0);
    }

    #[test]
    fn relu_forward() {
        let mut t = Tape::<f64>::new();
        let a = t.var(vec![-1.0, 2.0], 1, 2).unwrap();
        let r = t.relu(a).unwrap();
        assert_eq!(t.value(r), &[0.0, 2.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::<f64>::new();
        let i = t.constant(vec![1.0, 0.0, 0.0, 1.0], 2, 2).unwrap();
        let m = t.var(vec![5.0, 6.0, 7.0, 8.0], 2, 2).unwrap();
        let p = t.matmul(i, m).unwrap();
        assert_eq!(t.value(p), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.var(vec![3.0], 1, 1).unwrap();
        let y = t.mul(x, x).unwrap();
        let g = t.grad(y, &[x]).unwrap();
        assert_eq!(t.value(g[0]), &[6.0]);
    }

    #[test]
    fn norm_sq_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.var(vec![1.0, 2.0], 1, 2).unwrap();
        let y = t.l2_norm_sq(x).unwrap();
        let g = t.grad(y, &[x]).unwrap();
        assert_eq!(t.value(g[0]), &[2.0, 4.0]);
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut t = Tape::<f64>::new();
        let a = t.var(vec![1.0, 2.0], 1, 2).unwrap();
        let b = t.var(vec![1.0, 2.0, 3.0], 1, 3).unwrap();
        match t.add(a, b) {
            Err(Error::Shape { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "add");
            }
            other => panic!("expected shape error, got {other:?}"),
        }
        assert!(matches!(t.matmul(a, b), Err(Error::Shape { op: "matmul", .. })));
    }

    #[test]
    fn grad_rejects_non_scalar() {
        let mut t = Tape::<f64>::new();
        let a = t.var(vec![1.0, 2.0], 1, 2).unwrap();
        assert!(matches!(t.grad(a, &[a]), Err(Error::NonScalarOutput { .. })));
    }

    #[test]
    fn grad_rejects_foreign_var() {
        let mut t1 = Tape::<f64>::new();
        let mut t2 = Tape::<f64>::new();
        let a = t1.var(vec![1.0], 1, 1).unwrap();
        let b = t2.var(vec![1.0], 1, 1).unwrap();
        let y = t1.mul(a, a).unwrap();
        assert!(matches!(t1.grad(y, &[b]), Err(Error::ForeignVar { .. })));
    }

    #[test]
    fn unrelated_input_gets_zero() {
        let mut t = Tape::<f64>::new();
        let a = t.var(vec![2.0], 1, 1).unwrap();
        let b = t.var(vec![5.0, 1.0], 1, 2).unwrap();
        let y = t.mul(a, a).unwrap();
        let g = t.grad(y, &[a, b]).unwrap();
        assert_eq!(t.value(g[0]), &[4.0]);
        assert_eq!(t.value(g[1]), &[0.0, 0.0]);
    }

    #[test]
    fn second_derivative_of_cube() {
        // f = x^3, f' = 3x^2, f'' = 6x
        let mut t = Tape::<f64>::new();
        let x = t.var(vec![2.0], 1, 1).unwrap();
        let x2 = t.mul(x, x).unwrap();
        let x3 = t.mul(x2, x).unwrap();
        let g = t.grad(x3, &[x]).unwrap()[0];
        assert_eq!(t.scalar(g), 12.0);
        let h = t.grad(g, &[x]).unwrap()[0];
        assert_eq!(t.scalar(h), 12.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::<f64>::new();
        let z = t.var(vec![1.0, 2.0, 3.0, -1.0, 0.0, 1000.0], 2, 3).unwrap();
        let s = t.softmax(z).unwrap();
        let v = t.value(s);
        assert!((v[0] + v[1] + v[2] - 1.0).abs() < 1e-15);
        assert!((v[5] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn f32_tape_works() {
        let mut t = Tape::<f32>::new();
        let z = t.var(vec![0.0, 0.0], 1, 2).unwrap();
        let y = t.constant(vec![1.0, 0.0], 1, 2).unwrap();
        let l = t.softmax_cross_entropy(z, y).unwrap();
        assert!((t.scalar(l) - std::f32::consts::LN_2).abs() < 1e-6);
    }
}
