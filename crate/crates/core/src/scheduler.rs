//! Per-round communication budgets under a cumulative cap.
//!
//! A schedule assigns each round `t` of `T` an integer budget `H(t) >= 1` in
//! scalar units. Client `i` of `N` reads the schedule at the shifted round
//! `(t + i*T/N) mod T`, which keeps the per-round total across clients close
//! to `N` times the schedule's mean.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetSchedule {
    pub budgets: Vec<usize>,
    /// Nominal per-round budget B.
    pub nominal: usize,
}

impl BudgetSchedule {
    pub fn rounds(&self) -> usize {
        self.budgets.len()
    }

    pub fn total(&self) -> usize {
        self.budgets.iter().sum()
    }

    pub fn get(&self, t: usize) -> usize {
        self.budgets[t]
    }

    /// The schedule as seen by client `i` of `n`: entry `t` is this
    /// schedule's entry `(t + floor(i*T/n)) mod T`.
    pub fn shifted(&self, i: usize, n: usize) -> BudgetSchedule {
        let t_len = self.rounds();
        if t_len == 0 || n == 0 {
            return self.clone();
        }
        let offset = (i * t_len) / n;
        BudgetSchedule {
            budgets: (0..t_len).map(|t| self.budgets[(t + offset) % t_len]).collect(),
            nominal: self.nominal,
        }
    }
}

fn check_nominal(b: usize) -> Result<()> {
    if b == 0 {
        return Err(Error::Invalid("budget B must be >= 1".into()));
    }
    Ok(())
}

fn phase(t: f64, rounds: usize, i: usize, clients: usize) -> f64 {
    let tt = rounds as f64;
    let shift = if clients == 0 { 0.0 } else { i as f64 * tt / clients as f64 };
    (t + shift).rem_euclid(tt)
}

fn round_clamp(x: f64) -> usize {
    x.round().max(1.0) as usize
}

pub fn constant_schedule(b: usize, rounds: usize) -> Result<BudgetSchedule> {
    check_nominal(b)?;
    Ok(BudgetSchedule {
        budgets: vec![b; rounds],
        nominal: b,
    })
}

/// Unrounded linear budget `(1 - B) * phase / T + B`.
pub fn linear_budget(b: usize, rounds: usize, t: f64, i: usize, clients: usize) -> f64 {
    let bf = b as f64;
    (1.0 - bf) * phase(t, rounds, i, clients) / rounds as f64 + bf
}

/// Unrounded cosine budget `(B - 1) * (1 - cos(phase * pi / T)) / 2 + 1`.
pub fn cosine_budget(b: usize, rounds: usize, t: f64, i: usize, clients: usize) -> f64 {
    let bf = b as f64;
    (bf - 1.0) * (1.0 - (phase(t, rounds, i, clients) * PI / rounds as f64).cos()) / 2.0 + 1.0
}

/// Linearly decaying budget, rounded and clamped to at least 1.
///
/// Its mean is about `(B + 1) / 2`, so its total stays below `B * T`.
pub fn linear_schedule(b: usize, rounds: usize, i: usize, clients: usize) -> Result<BudgetSchedule> {
    check_nominal(b)?;
    Ok(BudgetSchedule {
        budgets: (0..rounds)
            .map(|t| round_clamp(linear_budget(b, rounds, t as f64, i, clients)))
            .collect(),
        nominal: b,
    })
}

/// Half-cosine ramp from 1 up towards B, rounded and clamped to at least 1.
pub fn cosine_schedule(b: usize, rounds: usize, i: usize, clients: usize) -> Result<BudgetSchedule> {
    check_nominal(b)?;
    Ok(BudgetSchedule {
        budgets: (0..rounds)
            .map(|t| round_clamp(cosine_budget(b, rounds, t as f64, i, clients)))
            .collect(),
        nominal: b,
    })
}

/// Rounds `values` (all `>= 1`) to integers `>= 1` summing to `total`,
/// handing the leftover units to the largest fractional parts first.
pub fn largest_remainder(values: &[f64], total: usize) -> Vec<usize> {
    let mut out: Vec<usize> = values.iter().map(|v| (v.floor() as usize).max(1)).collect();
    let mut order: Vec<usize> = (0..values.len()).collect();
    let frac = |j: usize| values[j] - values[j].floor();
    order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
    let mut sum: usize = out.iter().sum();
    let mut k = 0;
    while sum < total && !order.is_empty() {
        out[order[k % order.len()]] += 1;
        sum += 1;
        k += 1;
    }
    // only reachable when flooring pushed an entry up to 1
    let mut k = order.len();
    while sum > total && k > 0 {
        k -= 1;
        let j = order[k];
        if out[j] > 1 {
            out[j] -= 1;
            sum -= 1;
            k = if k == 0 { order.len() } else { k };
        }
    }
    out
}

/// Objective maximised by [`optimized_schedule`]:
/// `sum_t H(t) * (1 - t/T) - tau * #{t : H(t) != B}`.
pub fn schedule_objective(budgets: &[usize], nominal: usize, tau: f64) -> f64 {
    let t_len = budgets.len() as f64;
    let mut gain = 0.0;
    let mut deviating = 0usize;
    for (t, &h) in budgets.iter().enumerate() {
        gain += h as f64 * (1.0 - t as f64 / t_len);
        if h != nominal {
            deviating += 1;
        }
    }
    if deviating == 0 {
        gain
    } else {
        gain - tau * deviating as f64
    }
}

const SLOPE_GRID: usize = 256;

/// Front-loaded schedule maximising [`schedule_objective`] over linear decays.
///
/// Candidates are `H(t) = B + a * ((T - 1)/2 - t)` for slopes `a` between 0
/// (constant) and the steepest slope keeping `H(T - 1) >= 1`. Each candidate
/// is rounded so that it sums to exactly `B * T`; the best one wins, ties
/// going to the flatter slope. Every result is non-increasing.
pub fn optimized_schedule(b: usize, rounds: usize, tau: f64) -> Result<BudgetSchedule> {
    check_nominal(b)?;
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::Invalid(format!("tau must be >= 0, got {tau}")));
    }
    if rounds <= 1 || b == 1 {
        return constant_schedule(b, rounds);
    }
    let bf = b as f64;
    let center = (rounds as f64 - 1.0) / 2.0;
    let max_slope = (bf - 1.0) / center;
    let total = b * rounds;

    let mut best: Option<(f64, Vec<usize>)> = None;
    for step in 0..=SLOPE_GRID {
        let a = max_slope * step as f64 / SLOPE_GRID as f64;
        let raw: Vec<f64> = (0..rounds).map(|t| (bf + a * (center - t as f64)).max(1.0)).collect();
        let budgets = largest_remainder(&raw, total);
        let score = schedule_objective(&budgets, b, tau);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, budgets));
        }
    }
    Ok(BudgetSchedule {
        budgets: best.expect("grid is non-empty").1,
        nominal: b,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SchedulerKind {
    Constant,
    Linear,
    Cosine,
    Optimized { tau: f64 },
}

impl SchedulerKind {
    pub fn name(&self) -> &'static str {
        match self {
            SchedulerKind::Constant => "constant",
            SchedulerKind::Linear => "linear",
            SchedulerKind::Cosine => "cosine",
            SchedulerKind::Optimized { .. } => "optimized",
        }
    }

    /// Parses a scheduler name; `tau` only matters for `optimized`.
    pub fn parse(name: &str, tau: f64) -> Result<Self> {
        Ok(match name {
            "constant" => SchedulerKind::Constant,
            "linear" => SchedulerKind::Linear,
            "cosine" => SchedulerKind::Cosine,
            "optimized" => SchedulerKind::Optimized { tau },
            other => {
                return Err(Error::Invalid(format!(
                    "unknown scheduler `{other}` (expected constant, linear, cosine or optimized)"
                )))
            }
        })
    }
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchedulerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchedulerKind::parse(s, 3.0)
    }
}

/// Budgets for every (round, client) pair, fixed before training starts.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetPlan {
    pub kind: SchedulerKind,
    pub nominal: usize,
    per_client: Vec<BudgetSchedule>,
}

impl BudgetPlan {
    pub fn new(kind: SchedulerKind, b: usize, rounds: usize, clients: usize) -> Result<Self> {
        if clients == 0 {
            return Err(Error::Invalid("need at least one client".into()));
        }
        let per_client = match kind {
            SchedulerKind::Constant => vec![constant_schedule(b, rounds)?; clients],
            SchedulerKind::Linear => (0..clients)
                .map(|i| linear_schedule(b, rounds, i, clients))
                .collect::<Result<_>>()?,
            SchedulerKind::Cosine => (0..clients)
                .map(|i| cosine_schedule(b, rounds, i, clients))
                .collect::<Result<_>>()?,
            SchedulerKind::Optimized { tau } => {
                let base = optimized_schedule(b, rounds, tau)?;
                (0..clients).map(|i| base.shifted(i, clients)).collect()
            }
        };
        Ok(BudgetPlan {
            kind,
            nominal: b,
            per_client,
        })
    }

    pub fn budget(&self, t: usize, client: usize) -> usize {
        self.per_client[client].get(t)
    }

    pub fn client(&self, i: usize) -> &BudgetSchedule {
        &self.per_client[i]
    }

    pub fn clients(&self) -> usize {
        self.per_client.len()
    }

    pub fn rounds(&self) -> usize {
        self.per_client.first().map_or(0, BudgetSchedule::rounds)
    }

    /// Sum over clients of the budgets at round `t`.
    pub fn round_total(&self, t: usize) -> usize {
        self.per_client.iter().map(|s| s.get(t)).sum()
    }
}
