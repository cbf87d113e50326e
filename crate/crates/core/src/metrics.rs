//! Traffic, fidelity and accuracy measurements, and the per-round log.

use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{predict_logits, ModelSpec, ParamVector};
use crate::scalar::{cosine, Scalar};

/// `dense / compressed`; both counts in scalar units.
pub fn compression_ratio(dense: usize, compressed: usize) -> Result<f64> {
    if compressed == 0 {
        return Err(Error::Invalid("compression ratio undefined for a zero-cost payload".into()));
    }
    Ok(dense as f64 / compressed as f64)
}

/// Compression efficiency `E = cos(reconstruction, target)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Efficiency {
    pub value: f64,
    /// Set when either vector is zero; `value` is then 0.
    pub degenerate: bool,
}

pub fn compression_efficiency<T: Scalar>(reconstruction: &ParamVector<T>, target: &ParamVector<T>) -> Result<Efficiency> {
    if reconstruction.dim() != target.dim() {
        return Err(Error::Dim {
            expected: target.dim(),
            found: reconstruction.dim(),
        });
    }
    Ok(match cosine(reconstruction.as_slice(), target.as_slice()) {
        Some(c) => Efficiency {
            value: c.as_f64(),
            degenerate: false,
        },
        None => Efficiency {
            value: 0.0,
            degenerate: true,
        },
    })
}

/// Accuracy and mean cross-entropy of `w` on `data`.
///
/// The predicted class is the arg-max logit, ties going to the lowest class.
pub fn evaluate<T: Scalar>(spec: &ModelSpec, w: &ParamVector<T>, data: &Dataset<T>) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty dataset".into()));
    }
    let c = spec.classes();
    let logits = predict_logits(spec, w, &data.features, data.len())?;
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (row, &label) in logits.chunks(c).zip(&data.labels) {
        let mut best = 0;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
        let m = row[best].as_f64();
        let lse = m + row.iter().map(|z| (z.as_f64() - m).exp()).sum::<f64>().ln();
        loss += lse - row[label].as_f64();
    }
    let n = data.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub t: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    /// Scalars sent by clients this round.
    pub uplink_cost: usize,
    /// Scalars received by clients to start this round.
    pub downlink_cost: usize,
    /// Sum of the uplink budgets assigned to this round's participants.
    pub budget_used: usize,
    /// Per-participant efficiency, in participant order.
    pub client_eff: Vec<f64>,
    pub mean_eff: f64,
    pub participants: Vec<usize>,
    /// Participants whose efficiency was undefined or whose budget was too
    /// small to send anything.
    pub degenerate: usize,
    /// Whether every client recovered the server's broadcast model exactly.
    pub lineage_consistent: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<RoundRecord>,
}

pub const CSV_HEADER: &str = "t,train_loss,test_acc,uplink_cost,downlink_cost,mean_eff,budget_used";

impl MetricsLog {
    pub fn push(&mut self, r: RoundRecord) {
        self.records.push(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&RoundRecord> {
        self.records.last()
    }

    pub fn total_uplink(&self) -> usize {
        self.records.iter().map(|r| r.uplink_cost).sum()
    }

    pub fn total_downlink(&self) -> usize {
        self.records.iter().map(|r| r.downlink_cost).sum()
    }

    /// Mean efficiency over all rounds.
    pub fn mean_efficiency(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.mean_eff).sum::<f64>() / self.records.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.t, r.train_loss, r.test_acc, r.uplink_cost, r.downlink_cost, r.mean_eff, r.budget_used
            )
            .expect("writing to a String");
        }
        out
    }
}
