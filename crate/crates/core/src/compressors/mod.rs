//! Gradient compressors behind one interface.
//!
//! Every compressor maps a target delta to a [`Payload`] whose wire cost fits
//! the round budget, together with the reconstruction the receiver will
//! obtain from that payload. Costs are counted in 32-bit scalar units: a
//! dense value costs 1, a sparse (index, value) pair costs 2, and packed sign
//! bits cost 1 per started group of 32.

mod quantize;
mod synthetic;
pub mod wire;

use std::fmt;
use std::str::FromStr;

pub use quantize::{sign_compress, ternary_compress, ternary_k_for_budget, topk_compress};
pub use synthetic::{
    compute_scale, grad_of_grad_objective, optimize_synthetic, optimize_synthetic_from, synthetic_gradient,
    synthetic_objective, synthetic_rows_for_budget, ObjectiveEval, ScaleFit, SynthSettings, SyntheticBatch,
    SyntheticOutcome, SyntheticPayload,
};

use crate::error::{Error, Result};
use crate::models::{ParamVector, TapeModel};
use crate::scalar::Scalar;

/// Transmitted form of one compressed update.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload<T> {
    Dense(ParamVector<T>),
    Sparse {
        dim: usize,
        indices: Vec<usize>,
        values: Vec<T>,
    },
    /// `scale * sign`; `negative[j]` holds the sign bit of entry `j`.
    Sign {
        scale: T,
        negative: Vec<bool>,
    },
    /// `+-magnitude` at `indices`, zero elsewhere.
    Ternary {
        dim: usize,
        indices: Vec<usize>,
        negative: Vec<bool>,
        magnitude: T,
    },
    Synthetic(SyntheticPayload<T>),
}

pub(crate) fn words32(bits: usize) -> usize {
    bits.div_ceil(32)
}

impl<T: Scalar> Payload<T> {
    /// A payload that decompresses to the zero vector and costs nothing.
    pub fn empty(dim: usize) -> Self {
        Payload::Sparse {
            dim,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Number of 32-bit-equivalent scalars on the wire.
    pub fn cost(&self) -> usize {
        match self {
            Payload::Dense(v) => v.dim(),
            Payload::Sparse { indices, .. } => 2 * indices.len(),
            Payload::Sign { negative, .. } => words32(negative.len()) + 1,
            Payload::Ternary { indices, .. } => indices.len() + words32(indices.len()) + 1,
            Payload::Synthetic(p) => p.cost(),
        }
    }

    pub fn variant(&self) -> &'static str {
        match self {
            Payload::Dense(_) => "dense",
            Payload::Sparse { .. } => "sparse",
            Payload::Sign { .. } => "sign",
            Payload::Ternary { .. } => "ternary",
            Payload::Synthetic(_) => "synthetic",
        }
    }
}

/// Which compressor a participant runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CompressorKind {
    /// No compression (FedAvg).
    Identity,
    /// Largest-magnitude sparsification (DGC style).
    TopK,
    /// Scaled sign quantization (signSGD with error feedback).
    Sign,
    /// Sparse ternary: top-k signs with one shared magnitude (STC style).
    Ternary,
    /// Synthetic features whose induced gradient replays the update.
    Synthetic,
}

impl CompressorKind {
    pub const ALL: [CompressorKind; 5] = [
        CompressorKind::Identity,
        CompressorKind::TopK,
        CompressorKind::Sign,
        CompressorKind::Ternary,
        CompressorKind::Synthetic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CompressorKind::Identity => "identity",
            CompressorKind::TopK => "topk",
            CompressorKind::Sign => "sign",
            CompressorKind::Ternary => "ternary",
            CompressorKind::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for CompressorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CompressorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CompressorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown compressor `{s}` (expected identity, topk, sign, ternary or synthetic)")))
    }
}

/// Shared training priors needed to run or invert the synthetic compressor.
#[derive(Clone, Copy)]
pub struct SyntheticPrior<'a, T: Scalar> {
    pub model: &'a dyn TapeModel<T>,
    /// Weights at which the synthetic gradient is evaluated.
    pub weights: &'a ParamVector<T>,
    pub settings: SynthSettings<T>,
    pub seed: u64,
}

impl<T: Scalar> fmt::Debug for SyntheticPrior<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SyntheticPrior")
            .field("weights_dim", &self.weights.dim())
            .field("settings", &self.settings)
            .field("seed", &self.seed)
            .finish()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CompressionContext<'a, T: Scalar> {
    pub budget: usize,
    pub prior: Option<SyntheticPrior<'a, T>>,
}

impl<'a, T: Scalar> CompressionContext<'a, T> {
    pub fn with_budget(budget: usize) -> Self {
        CompressionContext { budget, prior: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compressed<T> {
    pub payload: Payload<T>,
    pub reconstruction: ParamVector<T>,
}

/// Compresses `target` within `ctx.budget`.
///
/// The identity compressor is exempt from the budget. The reconstruction is
/// always produced by [`decompress`], so it matches the receiver bit for bit.
pub fn compress<T: Scalar>(kind: CompressorKind, target: &ParamVector<T>, ctx: &CompressionContext<'_, T>) -> Result<Compressed<T>> {
    let dim = target.dim();
    let payload = match kind {
        CompressorKind::Identity => Payload::Dense(target.clone()),
        CompressorKind::TopK => {
            let k = (ctx.budget / 2).min(dim);
            if k == 0 {
                return Err(Error::BudgetTooSmall {
                    compressor: "topk",
                    budget: ctx.budget,
                    needed: 2,
                });
            }
            topk_compress(target, k)
        }
        CompressorKind::Sign => {
            let needed = words32(dim) + 1;
            if ctx.budget < needed {
                return Err(Error::BudgetTooSmall {
                    compressor: "sign",
                    budget: ctx.budget,
                    needed,
                });
            }
            sign_compress(target)
        }
        CompressorKind::Ternary => {
            let k = ternary_k_for_budget(ctx.budget).min(dim);
            if k == 0 {
                return Err(Error::BudgetTooSmall {
                    compressor: "ternary",
                    budget: ctx.budget,
                    needed: 3,
                });
            }
            ternary_compress(target, k)
        }
        CompressorKind::Synthetic => {
            let prior = ctx.prior.as_ref().ok_or(Error::MissingPrior("synthetic compression needs model and weights"))?;
            if prior.weights.dim() != dim {
                return Err(Error::Dim {
                    expected: prior.weights.dim(),
                    found: dim,
                });
            }
            let out = optimize_synthetic(prior.model, prior.weights, target, ctx.budget, &prior.settings, prior.seed)?;
            Payload::Synthetic(out.payload)
        }
    };
    let reconstruction = decompress(&payload, ctx.prior.as_ref())?;
    Ok(Compressed { payload, reconstruction })
}

/// Rebuilds the update carried by `payload`.
///
/// Synthetic payloads need the same prior (model and weights) the sender used.
pub fn decompress<T: Scalar>(payload: &Payload<T>, prior: Option<&SyntheticPrior<'_, T>>) -> Result<ParamVector<T>> {
    match payload {
        Payload::Dense(v) => Ok(v.clone()),
        Payload::Sparse { dim, indices, values } => {
            let mut out = vec![T::zero(); *dim];
            for (&i, &v) in indices.iter().zip(values) {
                *out.get_mut(i).ok_or_else(|| Error::Wire(format!("index {i} out of range {dim}")))? = v;
            }
            Ok(ParamVector::from_vec(out))
        }
        Payload::Sign { scale, negative } => Ok(ParamVector::from_vec(
            negative.iter().map(|&n| if n { -*scale } else { *scale }).collect(),
        )),
        Payload::Ternary {
            dim,
            indices,
            negative,
            magnitude,
        } => {
            let mut out = vec![T::zero(); *dim];
            for (&i, &n) in indices.iter().zip(negative) {
                *out.get_mut(i).ok_or_else(|| Error::Wire(format!("index {i} out of range {dim}")))? =
                    if n { -*magnitude } else { *magnitude };
            }
            Ok(ParamVector::from_vec(out))
        }
        Payload::Synthetic(p) => {
            let prior = prior.ok_or(Error::MissingPrior("synthetic decompression needs model and weights"))?;
            let grad = synthetic_gradient(prior.model, prior.weights, &p.batch)?;
            Ok(grad.scaled(p.scale))
        }
    }
}

/// Per-participant error-feedback accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorState<T> {
    pub eps: ParamVector<T>,
}

impl<T: Scalar> ErrorState<T> {
    pub fn new(dim: usize) -> Self {
        ErrorState {
            eps: ParamVector::zeros(dim),
        }
    }

    /// The compression target `raw + eps`.
    pub fn target(&self, raw: &ParamVector<T>) -> Result<ParamVector<T>> {
        raw.add(&self.eps)
    }
}

/// `eps + raw - reconstruction`
pub fn ef_update<T: Scalar>(state: &ErrorState<T>, raw: &ParamVector<T>, reconstruction: &ParamVector<T>) -> Result<ErrorState<T>> {
    Ok(ErrorState {
        eps: state.eps.add(raw)?.sub(reconstruction)?,
    })
}
