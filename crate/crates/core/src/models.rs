//! Small differentiable classifiers viewed through a flat parameter vector.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};
use crate::seed;

/// Flat model parameters, gradients, deltas or error accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T> {
    data: Vec<T>,
}

impl<T: Scalar> ParamVector<T> {
    pub fn zeros(dim: usize) -> Self {
        ParamVector {
            data: vec![T::zero(); dim],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        ParamVector { data }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|x| *x == T::zero())
    }

    fn check_dim(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::Dim {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(Self::from_vec(
            self.data.iter().zip(&other.data).map(|(a, b)| *a + *b).collect(),
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(Self::from_vec(
            self.data.iter().zip(&other.data).map(|(a, b)| *a - *b).collect(),
        ))
    }

    pub fn scaled(&self, c: T) -> Self {
        Self::from_vec(self.data.iter().map(|a| *a * c).collect())
    }

    /// `self += c * other`
    pub fn axpy(&mut self, c: T, other: &Self) -> Result<()> {
        self.check_dim(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * *b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> T {
        scalar::dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> T {
        scalar::norm(&self.data)
    }

    pub fn l1_norm(&self) -> T {
        scalar::l1_norm(&self.data)
    }
}

/// A loss that can be rebuilt on a tape from flat parameters and a batch.
///
/// Both the synthetic-feature compressor and its decompressor go through
/// [`batch_gradient`], so sender and receiver run the same kernel.
pub trait TapeModel<T: Scalar>: Sync {
    fn param_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// Number of label columns.
    fn label_dim(&self) -> usize;
    /// Registers `w` on the tape as one or more differentiable blocks.
    fn param_vars(&self, tape: &mut Tape<T>, w: &ParamVector<T>) -> Result<Vec<Var>>;
    /// Mean loss of the batch `(features, labels)` under `params`.
    fn loss(&self, tape: &mut Tape<T>, params: &[Var], features: Var, labels: Var) -> Result<Var>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    LogReg,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

/// Fully connected softmax classifier.
///
/// Parameters are laid out layer by layer: the `fan_in x fan_out` weight
/// matrix in row-major order, then the `fan_out` bias.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub layers: Vec<usize>,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn logreg(features: usize, classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::LogReg,
            layers: vec![features, classes],
            activation: Activation::Tanh,
        }
    }

    pub fn mlp(layers: Vec<usize>, activation: Activation) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            layers,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() < 2 || self.layers.contains(&0) {
            return Err(Error::Invalid(format!(
                "layer sizes must be at least two positive integers, got {:?}",
                self.layers
            )));
        }
        if self.kind == ModelKind::LogReg && self.layers.len() != 2 {
            return Err(Error::Invalid(format!(
                "logreg takes exactly [features, classes], got {:?}",
                self.layers
            )));
        }
        if self.layers[self.layers.len() - 1] < 2 {
            return Err(Error::Invalid("a classifier needs at least two classes".into()));
        }
        Ok(())
    }

    pub fn features(&self) -> usize {
        self.layers[0]
    }

    pub fn classes(&self) -> usize {
        self.layers[self.layers.len() - 1]
    }

    pub fn dim(&self) -> usize {
        self.layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamVector<T> {
        let mut rng = seed::rng(seed);
        let mut data = Vec::with_capacity(self.dim());
        for w in self.layers.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                data.push(T::lit(rng.random_range(-bound..=bound)));
            }
            data.extend(std::iter::repeat_n(T::zero(), fan_out));
        }
        ParamVector::from_vec(data)
    }
}

fn forward<T: Scalar>(spec: &ModelSpec, tape: &mut Tape<T>, params: &[Var], features: Var) -> Result<Var> {
    let rows = tape.shape(features).rows;
    let n_layers = spec.layers.len() - 1;
    let mut h = features;
    for l in 0..n_layers {
        let z = tape.matmul(h, params[2 * l])?;
        let b = tape.repeat_rows(params[2 * l + 1], rows)?;
        let z = tape.add(z, b)?;
        h = if l + 1 == n_layers {
            z
        } else {
            match spec.activation {
                Activation::Tanh => tape.tanh(z)?,
                Activation::Relu => tape.relu(z)?,
            }
        };
    }
    Ok(h)
}

impl<T: Scalar> TapeModel<T> for ModelSpec {
    fn param_dim(&self) -> usize {
        self.dim()
    }

    fn input_dim(&self) -> usize {
        self.features()
    }

    fn label_dim(&self) -> usize {
        self.classes()
    }

    fn param_vars(&self, tape: &mut Tape<T>, w: &ParamVector<T>) -> Result<Vec<Var>> {
        if w.dim() != self.dim() {
            return Err(Error::Dim {
                expected: self.dim(),
                found: w.dim(),
            });
        }
        let data = w.as_slice();
        let mut vars = Vec::with_capacity(2 * (self.layers.len() - 1));
        let mut off = 0;
        for l in self.layers.windows(2) {
            let (fan_in, fan_out) = (l[0], l[1]);
            let n = fan_in * fan_out;
            vars.push(tape.var(data[off..off + n].to_vec(), fan_in, fan_out)?);
            off += n;
            vars.push(tape.var(data[off..off + fan_out].to_vec(), 1, fan_out)?);
            off += fan_out;
        }
        Ok(vars)
    }

    fn loss(&self, tape: &mut Tape<T>, params: &[Var], features: Var, labels: Var) -> Result<Var> {
        let logits = forward(self, tape, params, features)?;
        tape.softmax_cross_entropy(logits, labels)
    }
}

/// Dense mini-batch: `rows x input_dim` features and `rows x label_dim` targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub features: Vec<T>,
    pub targets: Vec<T>,
    pub rows: usize,
}

impl<T: Scalar> Batch<T> {
    /// One-hot batch from hard labels.
    pub fn from_labels(features: Vec<T>, labels: &[usize], classes: usize) -> Result<Self> {
        let mut targets = vec![T::zero(); labels.len() * classes];
        for (r, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
            targets[r * classes + l] = T::one();
        }
        Ok(Batch {
            features,
            targets,
            rows: labels.len(),
        })
    }
}

/// Concatenates the values of `vars` in order.
pub fn flatten<T: Scalar>(tape: &Tape<T>, vars: &[Var]) -> ParamVector<T> {
    let mut out = Vec::with_capacity(vars.iter().map(|v| tape.shape(*v).len()).sum());
    for v in vars {
        out.extend_from_slice(tape.value(*v));
    }
    ParamVector::from_vec(out)
}

/// Mean loss of a batch and its gradient with respect to the flat parameters.
pub fn batch_gradient<T: Scalar, M: TapeModel<T> + ?Sized>(
    model: &M,
    w: &ParamVector<T>,
    batch: &Batch<T>,
) -> Result<(T, ParamVector<T>)> {
    if batch.rows == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    let (d, c) = (model.input_dim(), model.label_dim());
    if batch.features.len() != batch.rows * d {
        return Err(Error::Dim {
            expected: batch.rows * d,
            found: batch.features.len(),
        });
    }
    if batch.targets.len() != batch.rows * c {
        return Err(Error::Dim {
            expected: batch.rows * c,
            found: batch.targets.len(),
        });
    }
    let mut tape = Tape::new();
    let params = model.param_vars(&mut tape, w)?;
    let x = tape.constant(batch.features.clone(), batch.rows, d)?;
    let y = tape.constant(batch.targets.clone(), batch.rows, c)?;
    let loss = model.loss(&mut tape, &params, x, y)?;
    let grads = tape.grad(loss, &params)?;
    Ok((tape.scalar(loss), flatten(&tape, &grads)))
}

/// Mean softmax cross-entropy over `batch` and its exact gradient.
pub fn loss_and_grad<T: Scalar>(spec: &ModelSpec, w: &ParamVector<T>, batch: &Batch<T>) -> Result<(T, ParamVector<T>)> {
    batch_gradient(spec, w, batch)
}

/// Logits for every row of `features`.
pub fn predict_logits<T: Scalar>(spec: &ModelSpec, w: &ParamVector<T>, features: &[T], rows: usize) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let params = <ModelSpec as TapeModel<T>>::param_vars(spec, &mut tape, w)?;
    let x = tape.constant(features.to_vec(), rows, spec.features())?;
    let z = forward(spec, &mut tape, &params, x)?;
    Ok(tape.value(z).to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTrainConfig<T> {
    pub lr: T,
    /// Number of SGD steps, K.
    pub steps: usize,
    pub batch_size: usize,
}

/// `steps` plain SGD updates on the shard.
///
/// Batches are consecutive slices of a seeded shuffle of the shard; the shard
/// is reshuffled whenever it is exhausted.
pub fn local_train<T: Scalar>(
    spec: &ModelSpec,
    w: &ParamVector<T>,
    data: &Dataset<T>,
    shard: &ClientShard,
    cfg: &LocalTrainConfig<T>,
    seed: u64,
) -> Result<ParamVector<T>> {
    if cfg.steps == 0 {
        return Err(Error::Invalid("local iterations K must be >= 1".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch size must be >= 1".into()));
    }
    if shard.indices.is_empty() {
        return Err(Error::Invalid("cannot train on an empty shard".into()));
    }
    let mut rng = seed::rng(seed);
    let mut order = shard.indices.clone();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut w = w.clone();
    for _ in 0..cfg.steps {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch = data.batch(&order[cursor..end])?;
        cursor = end;
        let (_, g) = loss_and_grad(spec, &w, &batch)?;
        w.axpy(-cfg.lr, &g)?;
    }
    Ok(w)
}
