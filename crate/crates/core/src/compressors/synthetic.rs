//! Synthetic-feature compression.
//!
//! The sender learns a tiny batch of inputs and soft labels whose gradient at
//! the shared weights points along the update to transmit, then fits a single
//! scale so the residual is orthogonal to that gradient. The receiver replays
//! the same forward/backward pass on the batch and multiplies by the scale.

use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{batch_gradient, Batch, ParamVector, TapeModel};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSettings<T> {
    /// Gradient steps on the cosine objective, S.
    pub iters: usize,
    /// Weight of the `||D||^2` regulariser.
    pub lambda: T,
    /// Initial step size of every descent step.
    pub lr: T,
    /// Step halvings tried before a step is rejected.
    pub max_halvings: usize,
    /// Standard deviation of the initial synthetic features.
    pub init_std: T,
    pub learn_labels: bool,
}

impl<T: Scalar> Default for SynthSettings<T> {
    fn default() -> Self {
        SynthSettings {
            iters: 10,
            lambda: T::zero(),
            lr: T::lit(0.1),
            max_halvings: 5,
            init_std: T::lit(0.1),
            learn_labels: true,
        }
    }
}

/// Learnable inputs (`rows x feature_dim`) and soft labels (`rows x label_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBatch<T> {
    pub rows: usize,
    pub feature_dim: usize,
    pub label_dim: usize,
    pub features: Vec<T>,
    pub labels: Vec<T>,
}

impl<T: Scalar> SyntheticBatch<T> {
    pub fn zeros(rows: usize, feature_dim: usize, label_dim: usize) -> Self {
        SyntheticBatch {
            rows,
            feature_dim,
            label_dim,
            features: vec![T::zero(); rows * feature_dim],
            labels: vec![T::zero(); rows * label_dim],
        }
    }

    /// Features from `N(0, std^2)`, labels uniform `1/label_dim`.
    pub fn random(rows: usize, feature_dim: usize, label_dim: usize, std: T, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let normal = Normal::new(0.0, std.as_f64().max(0.0)).expect("finite std");
        let features = (0..rows * feature_dim).map(|_| T::lit(normal.sample(&mut rng))).collect();
        let u = T::one() / T::from_usize_lossy(label_dim);
        SyntheticBatch {
            rows,
            feature_dim,
            label_dim,
            features,
            labels: vec![u; rows * label_dim],
        }
    }

    fn as_batch(&self) -> Batch<T> {
        Batch {
            features: self.features.clone(),
            targets: self.labels.clone(),
            rows: self.rows,
        }
    }

    fn is_finite(&self) -> bool {
        self.features.iter().chain(&self.labels).all(|x| x.is_finite())
    }
}

/// Wire message of the synthetic compressor.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPayload<T> {
    pub batch: SyntheticBatch<T>,
    pub scale: T,
}

impl<T: Scalar> SyntheticPayload<T> {
    pub fn cost(&self) -> usize {
        self.batch.rows * (self.batch.feature_dim + self.batch.label_dim) + 1
    }
}

/// Largest row count `m` with `m * (feature_dim + label_dim) + 1 <= budget`.
pub fn synthetic_rows_for_budget(budget: usize, feature_dim: usize, label_dim: usize) -> Result<usize> {
    let per_row = feature_dim + label_dim;
    let rows = budget.saturating_sub(1) / per_row.max(1);
    if rows == 0 {
        return Err(Error::BudgetTooSmall {
            compressor: "synthetic",
            budget,
            needed: per_row + 1,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleFit<T> {
    pub scale: T,
    /// The synthetic gradient was zero, so no scale can align it.
    pub degenerate: bool,
}

/// Projection coefficient `(target . g) / ||g||^2`.
///
/// It leaves `target - s * g` orthogonal to `g`. A zero `g` yields `s = 0`
/// with the degenerate flag set.
pub fn compute_scale<T: Scalar>(target: &ParamVector<T>, synth_grad: &ParamVector<T>) -> Result<ScaleFit<T>> {
    if target.dim() != synth_grad.dim() {
        return Err(Error::Dim {
            expected: target.dim(),
            found: synth_grad.dim(),
        });
    }
    let nsq = synth_grad.dot(synth_grad);
    if nsq == T::zero() {
        return Ok(ScaleFit {
            scale: T::zero(),
            degenerate: true,
        });
    }
    Ok(ScaleFit {
        scale: target.dot(synth_grad) / nsq,
        degenerate: false,
    })
}

/// Mean-loss gradient of `model` at `w` on the synthetic batch.
///
/// This is the decompression kernel: sender and receiver both call it.
pub fn synthetic_gradient<T: Scalar>(
    model: &dyn TapeModel<T>,
    w: &ParamVector<T>,
    batch: &SyntheticBatch<T>,
) -> Result<ParamVector<T>> {
    if batch.feature_dim != model.input_dim() || batch.label_dim != model.label_dim() {
        return Err(Error::Dim {
            expected: model.input_dim() + model.label_dim(),
            found: batch.feature_dim + batch.label_dim,
        });
    }
    if batch.rows == 0 {
        return Ok(ParamVector::zeros(model.param_dim()));
    }
    Ok(batch_gradient(model, w, &batch.as_batch())?.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEval<T> {
    /// `1 - |cos(grad_w F(D, w), target)| + lambda * ||D||^2`
    pub value: T,
    pub cosine: T,
    pub grad_features: Vec<T>,
    pub grad_labels: Vec<T>,
}

fn check_dims<T: Scalar>(model: &dyn TapeModel<T>, w: &ParamVector<T>, batch: &SyntheticBatch<T>, target: &ParamVector<T>) -> Result<()> {
    for found in [w.dim(), target.dim()] {
        if found != model.param_dim() {
            return Err(Error::Dim {
                expected: model.param_dim(),
                found,
            });
        }
    }
    if batch.feature_dim != model.input_dim() {
        return Err(Error::Dim {
            expected: model.input_dim(),
            found: batch.feature_dim,
        });
    }
    if batch.label_dim != model.label_dim() {
        return Err(Error::Dim {
            expected: model.label_dim(),
            found: batch.label_dim,
        });
    }
    if batch.rows == 0 {
        return Err(Error::Invalid("synthetic batch needs at least one row".into()));
    }
    Ok(())
}

fn evaluate<T: Scalar>(
    model: &dyn TapeModel<T>,
    w: &ParamVector<T>,
    batch: &SyntheticBatch<T>,
    target: &ParamVector<T>,
    lambda: T,
    with_grad: bool,
) -> Result<ObjectiveEval<T>> {
    check_dims(model, w, batch, target)?;
    let target_norm = target.norm();
    if target_norm == T::zero() {
        return Err(Error::Invalid("cosine objective is undefined for a zero target".into()));
    }

    let mut tape = Tape::new();
    let params = model.param_vars(&mut tape, w)?;
    let x = tape.var(batch.features.clone(), batch.rows, batch.feature_dim)?;
    let y = tape.var(batch.labels.clone(), batch.rows, batch.label_dim)?;
    let loss = model.loss(&mut tape, &params, x, y)?;
    let grads = tape.grad(loss, &params)?;

    let mut dot: Option<Var> = None;
    let mut nsq: Option<Var> = None;
    let mut off = 0;
    let t = target.as_slice();
    for g in &grads {
        let s = tape.shape(*g);
        let block = tape.constant(t[off..off + s.len()].to_vec(), s.rows, s.cols)?;
        off += s.len();
        let d = tape.dot(*g, block)?;
        let n = tape.l2_norm_sq(*g)?;
        dot = Some(match dot {
            Some(acc) => tape.add(acc, d)?,
            None => d,
        });
        nsq = Some(match nsq {
            Some(acc) => tape.add(acc, n)?,
            None => n,
        });
    }
    let (dot, nsq) = (dot.expect("model has parameters"), nsq.expect("model has parameters"));

    let abs_cos = if tape.scalar(nsq) == T::zero() {
        tape.scalar_constant(T::zero())
    } else {
        let norm = tape.sqrt(nsq)?;
        let inv = tape.recip(norm)?;
        let cos = tape.mul(dot, inv)?;
        let cos = tape.scale(cos, T::one() / target_norm)?;
        tape.abs(cos)?
    };
    let cosine = if tape.scalar(nsq) == T::zero() {
        T::zero()
    } else {
        tape.scalar(dot) / (tape.scalar(nsq).sqrt() * target_norm)
    };
    let one = tape.scalar_constant(T::one());
    let mut obj = tape.sub(one, abs_cos)?;
    if lambda != T::zero() {
        let rx = tape.l2_norm_sq(x)?;
        let ry = tape.l2_norm_sq(y)?;
        let r = tape.add(rx, ry)?;
        let r = tape.scale(r, lambda)?;
        obj = tape.add(obj, r)?;
    }
    let value = tape.scalar(obj);
    if !value.is_finite() {
        return Err(Error::NonFinite("synthetic objective"));
    }

    let (grad_features, grad_labels) = if with_grad {
        let g = tape.grad(obj, &[x, y])?;
        let gx = tape.value(g[0]).to_vec();
        let gy = tape.value(g[1]).to_vec();
        if gx.iter().chain(&gy).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("second-order gradient"));
        }
        (gx, gy)
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(ObjectiveEval {
        value,
        cosine,
        grad_features,
        grad_labels,
    })
}

/// Value of the cosine-matching objective (no gradient).
pub fn synthetic_objective<T: Scalar>(
    model: &dyn TapeModel<T>,
    w: &ParamVector<T>,
    batch: &SyntheticBatch<T>,
    target: &ParamVector<T>,
    lambda: T,
) -> Result<ObjectiveEval<T>> {
    evaluate(model, w, batch, target, lambda, false)
}

/// Objective value and its gradient with respect to the synthetic batch.
///
/// The model gradient is built on the tape and differentiated a second time,
/// this time with respect to the batch entries.
pub fn grad_of_grad_objective<T: Scalar>(
    model: &dyn TapeModel<T>,
    w: &ParamVector<T>,
    batch: &SyntheticBatch<T>,
    target: &ParamVector<T>,
    lambda: T,
) -> Result<ObjectiveEval<T>> {
    evaluate(model, w, batch, target, lambda, true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOutcome<T> {
    pub payload: SyntheticPayload<T>,
    /// Objective after initialisation and after every descent step.
    pub trace: Vec<T>,
    pub synth_grad: ParamVector<T>,
    pub cosine: T,
    pub degenerate: bool,
}

/// Synthesises a payload for `target` within `budget`.
///
/// Uses as many synthetic rows as the budget admits, a seeded initial batch,
/// and returns an all-zero payload with scale 0 for a zero target.
pub fn optimize_synthetic<T: Scalar>(
    model: &dyn TapeModel<T>,
    w: &ParamVector<T>,
    target: &ParamVector<T>,
    budget: usize,
    settings: &SynthSettings<T>,
    seed: u64,
) -> Result<SyntheticOutcome<T>> {
    let (d, c) = (model.input_dim(), model.label_dim());
    let rows = synthetic_rows_for_budget(budget, d, c)?;
    if target.dim() != model.param_dim() {
        return Err(Error::Dim {
            expected: model.param_dim(),
            found: target.dim(),
        });
    }
    if target.is_zero() {
        return Ok(SyntheticOutcome {
            payload: SyntheticPayload {
                batch: SyntheticBatch::zeros(rows, d, c),
                scale: T::zero(),
            },
            trace: Vec::new(),
            synth_grad: ParamVector::zeros(target.dim()),
            cosine: T::zero(),
            degenerate: true,
        });
    }
    let init = SyntheticBatch::random(rows, d, c, settings.init_std, seed);
    optimize_synthetic_from(model, w, target, init, settings)
}

/// Gradient descent on the objective from a given batch, then scale fitting.
///
/// Each step starts at `settings.lr` and halves the step until the objective
/// does not increase; a step that still increases it after
/// `settings.max_halvings` halvings is rejected and the search stops.
pub fn optimize_synthetic_from<T: Scalar>(
    model: &dyn TapeModel<T>,
    w: &ParamVector<T>,
    target: &ParamVector<T>,
    init: SyntheticBatch<T>,
    settings: &SynthSettings<T>,
) -> Result<SyntheticOutcome<T>> {
    let mut batch = init;
    let mut eval = grad_of_grad_objective(model, w, &batch, target, settings.lambda)?;
    let mut trace = vec![eval.value];

    for _ in 0..settings.iters {
        let mut step = settings.lr;
        let mut next = None;
        for _ in 0..=settings.max_halvings {
            let mut cand = batch.clone();
            for (f, g) in cand.features.iter_mut().zip(&eval.grad_features) {
                *f -= step * *g;
            }
            if settings.learn_labels {
                for (l, g) in cand.labels.iter_mut().zip(&eval.grad_labels) {
                    *l -= step * *g;
                }
            }
            if cand.is_finite() {
                match grad_of_grad_objective(model, w, &cand, target, settings.lambda) {
                    Ok(e) if e.value <= eval.value => {
                        next = Some((cand, e));
                        break;
                    }
                    Ok(_) | Err(Error::NonFinite(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            step *= T::lit(0.5);
        }
        match next {
            Some((b, e)) => {
                batch = b;
                eval = e;
                trace.push(eval.value);
            }
            None => break,
        }
    }

    let synth_grad = synthetic_gradient(model, w, &batch)?;
    let fit = compute_scale(target, &synth_grad)?;
    Ok(SyntheticOutcome {
        payload: SyntheticPayload {
            batch,
            scale: fit.scale,
        },
        trace,
        synth_grad,
        cosine: eval.cosine,
        degenerate: fit.degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Activation, ModelSpec};

    /// `F = 1/2 * mean((w x - y)^2)` with one weight, one input, one label.
    struct ScalarRegression;

    impl TapeModel<f64> for ScalarRegression {
        fn param_dim(&self) -> usize {
            1
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn label_dim(&self) -> usize {
            1
        }
        fn param_vars(&self, tape: &mut Tape<f64>, w: &ParamVector<f64>) -> Result<Vec<Var>> {
            Ok(vec![tape.var(w.as_slice().to_vec(), 1, 1)?])
        }
        fn loss(&self, tape: &mut Tape<f64>, params: &[Var], x: Var, y: Var) -> Result<Var> {
            let rows = tape.shape(x).rows;
            let pred = tape.matmul(x, params[0])?;
            let r = tape.sub(pred, y)?;
            let sq = tape.l2_norm_sq(r)?;
            tape.scale(sq, 0.5 / rows as f64)
        }
    }

    fn one(x: f64, y: f64) -> SyntheticBatch<f64> {
        SyntheticBatch {
            rows: 1,
            feature_dim: 1,
            label_dim: 1,
            features: vec![x],
            labels: vec![y],
        }
    }

    fn pv(v: &[f64]) -> ParamVector<f64> {
        ParamVector::from_vec(v.to_vec())
    }

    #[test]
    fn scale_examples() {
        let g = pv(&[1.0, -2.0, 0.5]);
        assert_eq!(compute_scale(&g.scaled(2.0), &g).unwrap().scale, 2.0);
        assert_eq!(compute_scale(&pv(&[2.0, 1.0, 0.0]), &g).unwrap().scale, 0.0);
        assert_eq!(compute_scale(&pv(&[1.0, 1.0]), &pv(&[1.0, 0.0])).unwrap().scale, 1.0);
        let fit = compute_scale(&pv(&[1.0, 1.0]), &pv(&[0.0, 0.0])).unwrap();
        assert_eq!(fit, ScaleFit { scale: 0.0, degenerate: true });
    }

    #[test]
    fn exact_fit_is_stationary() {
        // w = 0, target 1: grad_w F = -y x = 1 at (x, y) = (1, -1)
        let w = pv(&[0.0]);
        let e = grad_of_grad_objective(&ScalarRegression, &w, &one(1.0, -1.0), &pv(&[1.0]), 0.0).unwrap();
        assert!((e.cosine - 1.0).abs() < 1e-15);
        assert_eq!(e.value, 0.0);
        assert_eq!(e.grad_features, vec![0.0]);
        assert_eq!(e.grad_labels, vec![0.0]);
    }

    #[test]
    fn exact_fit_reconstructs() {
        let w = pv(&[0.0]);
        let g = 0.37;
        let out = optimize_synthetic_from(&ScalarRegression, &w, &pv(&[g]), one(1.0, -g), &SynthSettings::default()).unwrap();
        let recon = out.synth_grad.scaled(out.payload.scale);
        assert!((recon.as_slice()[0] - g).abs() < 1e-15);
    }

    #[test]
    fn zero_target_gives_zero_payload() {
        let spec = ModelSpec::logreg(2, 2);
        let w: ParamVector<f64> = spec.init_params(1);
        let out = optimize_synthetic(&spec, &w, &ParamVector::zeros(6), 5, &SynthSettings::default(), 3).unwrap();
        assert_eq!(out.payload.scale, 0.0);
        assert!(out.payload.batch.features.iter().all(|&x| x == 0.0));
        assert_eq!(out.payload.cost(), 5);
    }

    #[test]
    fn rows_for_budget() {
        assert_eq!(synthetic_rows_for_budget(25, 20, 4).unwrap(), 1);
        assert_eq!(synthetic_rows_for_budget(49, 20, 4).unwrap(), 2);
        assert_eq!(synthetic_rows_for_budget(48, 20, 4).unwrap(), 1);
        assert!(matches!(
            synthetic_rows_for_budget(24, 20, 4),
            Err(Error::BudgetTooSmall { needed: 25, .. })
        ));
    }

    #[test]
    fn objective_trace_is_monotone() {
        let spec = ModelSpec::mlp(vec![3, 5, 2], Activation::Tanh);
        let w: ParamVector<f64> = spec.init_params(4);
        let target = spec.init_params::<f64>(5);
        let settings = SynthSettings {
            iters: 15,
            ..SynthSettings::default()
        };
        let out = optimize_synthetic(&spec, &w, &target, 13, &settings, 9).unwrap();
        assert_eq!(out.payload.batch.rows, 2);
        for pair in out.trace.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
        let r = out.synth_grad.scaled(out.payload.scale);
        let resid = target.sub(&r).unwrap();
        assert!(resid.dot(&out.synth_grad).abs() <= 1e-9 * target.norm() * out.synth_grad.norm());
    }

    #[test]
    fn dims_checked() {
        let spec = ModelSpec::logreg(2, 2);
        let w: ParamVector<f64> = spec.init_params(1);
        let bad = SyntheticBatch::<f64>::zeros(1, 3, 2);
        assert!(matches!(
            grad_of_grad_objective(&spec, &w, &bad, &pv(&[1.0; 6]), 0.0),
            Err(Error::Dim { .. })
        ));
        let ok = SyntheticBatch::<f64>::random(1, 2, 2, 0.1, 1);
        assert!(matches!(
            grad_of_grad_objective(&spec, &w, &ok, &pv(&[1.0; 5]), 0.0),
            Err(Error::Dim { .. })
        ));
    }
}
