#![allow(dead_code)]

use fedcomp::autodiff::{Tape, Var};
use fedcomp::compressors::{grad_of_grad_objective, synthetic_objective, SyntheticBatch};
use fedcomp::models::{batch_gradient, Batch, TapeModel};
use fedcomp::seed;
use fedcomp::{
    dirichlet_partition, gen_synthetic, run_experiment, Activation, BudgetPlan, CompressorKind, Dataset64,
    LocalTrainConfig, MetricsLog, ModelSpec, ParamVec64, Result, RoundConfig64, SchedulerKind, SynthSettings,
};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const H: f64 = 1e-5;

pub type Tape64 = Tape<f64>;
pub type Build = Box<dyn Fn(&mut Tape64, &[Var]) -> Result<Var>>;

/// Max over entries of `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Normal entries pushed at least 0.1 away from zero, to stay clear of kinks.
pub fn away_from_zero(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    normal_vec(rng, n)
        .into_iter()
        .map(|x: f64| if x.abs() < 0.1 { x.signum() * 0.1 + x } else { x })
        .collect()
}

pub struct Input {
    pub value: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

/// `sum(f(x) * r)` for a fixed random `r`, built on a fresh tape.
fn scalar_output(tape: &mut Tape64, f: &Build, vars: &[Var], r: &[f64]) -> Result<Var> {
    let out = f(tape, vars)?;
    let s = tape.shape(out);
    let rv = tape.constant(r[..s.len()].to_vec(), s.rows, s.cols)?;
    tape.dot(out, rv)
}

fn register(tape: &mut Tape64, inputs: &[Input]) -> Vec<Var> {
    inputs
        .iter()
        .map(|i| tape.var(i.value.clone(), i.rows, i.cols).unwrap())
        .collect()
}

fn eval(f: &Build, inputs: &[Input], r: &[f64]) -> f64 {
    let mut tape = Tape64::new();
    let vars = register(&mut tape, inputs);
    let s = scalar_output(&mut tape, f, &vars, r).unwrap();
    tape.scalar(s)
}

/// Max relative error of the reverse-mode gradient against central
/// differences, over every entry of every input.
pub fn gradcheck(f: &Build, inputs: &mut [Input], r: &[f64]) -> f64 {
    let mut tape = Tape64::new();
    let vars = register(&mut tape, inputs);
    let s = scalar_output(&mut tape, f, &vars, r).unwrap();
    let grads = tape.grad(s, &vars).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..inputs.len() {
        let analytic = tape.value(grads[k]).to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[k].value.len() {
            let x = inputs[k].value[j];
            inputs[k].value[j] = x + H;
            let up = eval(f, inputs, r);
            inputs[k].value[j] = x - H;
            let down = eval(f, inputs, r);
            inputs[k].value[j] = x;
            numeric.push((up - down) / (2.0 * H));
        }
        worst = worst.max(rel_err(&analytic, &numeric, 1e-4));
    }
    worst
}

/// Checks the taped backward pass itself: the gradient of
/// `sum(grad_x(sum(f(x) * r)) * r2)` against central differences of the
/// first-order gradient.
pub fn second_order_check(f: &Build, input: &mut Input, r: &[f64], r2: &[f64]) -> f64 {
    let first = |inp: &Input| -> f64 {
        let mut tape = Tape64::new();
        let x = tape.var(inp.value.clone(), inp.rows, inp.cols).unwrap();
        let s = scalar_output(&mut tape, f, &[x], r).unwrap();
        let g = tape.grad(s, &[x]).unwrap()[0];
        tape.value(g).iter().zip(r2).map(|(a, b)| a * b).sum()
    };
    let mut tape = Tape64::new();
    let x = tape.var(input.value.clone(), input.rows, input.cols).unwrap();
    let s = scalar_output(&mut tape, f, &[x], r).unwrap();
    let g = tape.grad(s, &[x]).unwrap()[0];
    let r2v = tape.constant(r2[..input.value.len()].to_vec(), input.rows, input.cols).unwrap();
    let h = tape.dot(g, r2v).unwrap();
    let hh = tape.grad(h, &[x]).unwrap()[0];
    let analytic = tape.value(hh).to_vec();
    let mut numeric = Vec::new();
    for j in 0..input.value.len() {
        let v = input.value[j];
        input.value[j] = v + H;
        let up = first(input);
        input.value[j] = v - H;
        let down = first(input);
        input.value[j] = v;
        numeric.push((up - down) / (2.0 * H));
    }
    rel_err(&analytic, &numeric, 1e-4)
}

#[derive(Clone, Copy, PartialEq)]
pub enum Domain {
    Any,
    /// Entries at least 0.1 away from zero.
    NonZero,
    /// Entries in [0.5, 2.5].
    Positive,
}

pub struct Case {
    pub name: &'static str,
    pub f: Build,
    pub shapes: Vec<(usize, usize)>,
    pub domain: Domain,
}

fn case(name: &'static str, shapes: Vec<(usize, usize)>, domain: Domain, f: impl Fn(&mut Tape64, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        f: Box::new(f),
        shapes,
        domain,
    }
}

/// Every tape primitive, plus the composite reductions and losses.
pub fn primitive_cases() -> Vec<Case> {
    use Domain::*;
    vec![
        case("add", vec![(3, 4), (3, 4)], Any, |t, v| t.add(v[0], v[1])),
        case("sub", vec![(3, 4), (3, 4)], Any, |t, v| t.sub(v[0], v[1])),
        case("mul", vec![(3, 4), (3, 4)], Any, |t, v| t.mul(v[0], v[1])),
        case("scale", vec![(2, 5)], Any, |t, v| t.scale(v[0], -1.7)),
        case("neg", vec![(2, 5)], Any, |t, v| t.neg(v[0])),
        case("tanh", vec![(3, 3)], Any, |t, v| t.tanh(v[0])),
        case("relu", vec![(3, 3)], NonZero, |t, v| t.relu(v[0])),
        case("exp", vec![(3, 3)], Any, |t, v| t.exp(v[0])),
        case("sqrt", vec![(3, 3)], Positive, |t, v| t.sqrt(v[0])),
        case("recip", vec![(3, 3)], Positive, |t, v| t.recip(v[0])),
        case("abs", vec![(3, 3)], NonZero, |t, v| t.abs(v[0])),
        case("matmul", vec![(3, 4), (4, 2)], Any, |t, v| t.matmul(v[0], v[1])),
        case("transpose", vec![(3, 4)], Any, |t, v| t.transpose(v[0])),
        case("sum", vec![(3, 4)], Any, |t, v| t.sum(v[0])),
        case("broadcast", vec![(1, 1)], Any, |t, v| t.broadcast(v[0], 3, 2)),
        case("row_sum", vec![(3, 4)], Any, |t, v| t.row_sum(v[0])),
        case("repeat_cols", vec![(3, 1)], Any, |t, v| t.repeat_cols(v[0], 4)),
        case("col_sum", vec![(3, 4)], Any, |t, v| t.col_sum(v[0])),
        case("repeat_rows", vec![(1, 4)], Any, |t, v| t.repeat_rows(v[0], 3)),
        case("log_sum_exp", vec![(3, 4)], Any, |t, v| t.log_sum_exp(v[0])),
        case("softmax", vec![(3, 4)], Any, |t, v| t.softmax(v[0])),
        case("dot", vec![(2, 5), (2, 5)], Any, |t, v| t.dot(v[0], v[1])),
        case("l2_norm_sq", vec![(2, 5)], Any, |t, v| t.l2_norm_sq(v[0])),
        case("softmax_cross_entropy", vec![(3, 4), (3, 4)], Any, |t, v| {
            t.softmax_cross_entropy(v[0], v[1])
        }),
    ]
}

pub fn sample_inputs(c: &Case, rng: &mut impl Rng) -> Vec<Input> {
    c.shapes
        .iter()
        .map(|&(rows, cols)| {
            let n = rows * cols;
            let value = match c.domain {
                Domain::Any => normal_vec(rng, n),
                Domain::NonZero => away_from_zero(rng, n),
                Domain::Positive => (0..n).map(|_| rng.random_range(0.5..2.5)).collect(),
            };
            Input { value, rows, cols }
        })
        .collect()
}

/// Random weights scaled like a trained model, not just the init.
pub fn random_weights(spec: &ModelSpec, rng: &mut impl Rng) -> ParamVec64 {
    ParamVec64::from_vec(normal_vec(rng, spec.dim()).into_iter().map(|x| 0.5 * x).collect())
}

/// Max relative error of the flat loss gradient of `spec` on a random
/// soft-label batch.
pub fn model_gradcheck(spec: &ModelSpec, rows: usize, seed: u64) -> f64 {
    let mut rng = seed::rng(seed);
    let w = random_weights(spec, &mut rng);
    let (d, c) = (spec.features(), spec.classes());
    let features = normal_vec(&mut rng, rows * d);
    let targets: Vec<f64> = (0..rows * c).map(|_| rng.random_range(0.0..1.0)).collect();
    let batch = Batch { features, targets, rows };
    let (_, g) = batch_gradient(spec, &w, &batch).unwrap();
    let mut numeric = Vec::with_capacity(w.dim());
    let mut wp = w.clone();
    for j in 0..w.dim() {
        let x = w.as_slice()[j];
        wp.as_mut_slice()[j] = x + H;
        let up = batch_gradient(spec, &wp, &batch).unwrap().0;
        wp.as_mut_slice()[j] = x - H;
        let down = batch_gradient(spec, &wp, &batch).unwrap().0;
        wp.as_mut_slice()[j] = x;
        numeric.push((up - down) / (2.0 * H));
    }
    rel_err(g.as_slice(), &numeric, 1e-4)
}

/// Max relative error of the gradient of the cosine-matching objective
/// with respect to the synthetic batch, against central differences.
pub fn objective_gradcheck(model: &dyn TapeModel<f64>, rows: usize, lambda: f64, seed: u64) -> f64 {
    let mut rng = seed::rng(seed);
    let w = ParamVec64::from_vec(normal_vec(&mut rng, model.param_dim()).into_iter().map(|x| 0.5 * x).collect());
    let target = ParamVec64::from_vec(normal_vec(&mut rng, model.param_dim()));
    let (d, c) = (model.input_dim(), model.label_dim());
    let batch = SyntheticBatch {
        rows,
        feature_dim: d,
        label_dim: c,
        features: normal_vec(&mut rng, rows * d),
        labels: (0..rows * c).map(|_| rng.random_range(0.0..1.0)).collect(),
    };
    let e = grad_of_grad_objective(model, &w, &batch, &target, lambda).unwrap();
    let value = |b: &SyntheticBatch<f64>| synthetic_objective(model, &w, b, &target, lambda).unwrap().value;
    let mut numeric = Vec::new();
    let mut b = batch.clone();
    for j in 0..b.features.len() {
        let x = b.features[j];
        b.features[j] = x + H;
        let up = value(&b);
        b.features[j] = x - H;
        let down = value(&b);
        b.features[j] = x;
        numeric.push((up - down) / (2.0 * H));
    }
    for j in 0..b.labels.len() {
        let x = b.labels[j];
        b.labels[j] = x + H;
        let up = value(&b);
        b.labels[j] = x - H;
        let down = value(&b);
        b.labels[j] = x;
        numeric.push((up - down) / (2.0 * H));
    }
    let analytic: Vec<f64> = e.grad_features.iter().chain(&e.grad_labels).copied().collect();
    rel_err(&analytic, &numeric, 1e-4)
}

/// Desk-scale non-IID task: Gaussian blobs split across clients.
#[derive(Clone, Copy, Debug)]
pub struct Task {
    pub hidden: usize,
    pub budget: usize,
    pub spread: f64,
    pub rounds: usize,
    pub clients: usize,
}

pub struct Prepared {
    pub spec: ModelSpec,
    pub train: Dataset64,
    pub test: Dataset64,
    pub shards: Vec<fedcomp::ClientShard>,
}

impl Task {
    pub fn prepare(&self, s: u64) -> Prepared {
        let train = gen_synthetic(4, 20, 500, self.spread, seed::derive(s, seed::STAGE_DATA)).unwrap();
        let test = gen_synthetic(4, 20, 250, self.spread, seed::derive(s, seed::STAGE_TEST_DATA)).unwrap();
        let shards = dirichlet_partition(&train, self.clients, 1.0, seed::derive(s, seed::STAGE_PARTITION)).unwrap();
        Prepared {
            spec: ModelSpec::mlp(vec![20, self.hidden, 4], Activation::Tanh),
            train,
            test,
            shards,
        }
    }

    pub fn config(&self, kind: CompressorKind, ef: bool, sched: SchedulerKind, s: u64) -> RoundConfig64 {
        RoundConfig64 {
            rounds: self.rounds,
            local: LocalTrainConfig {
                lr: 0.01,
                steps: 5,
                batch_size: 256,
            },
            uplink: kind,
            downlink: kind,
            double_way: false,
            error_feedback: ef,
            synth: SynthSettings::default(),
            plan: BudgetPlan::new(sched, self.budget, self.rounds, self.clients).unwrap(),
            clients_per_round: None,
            seed: s,
        }
    }

    pub fn run(&self, p: &Prepared, cfg: RoundConfig64) -> MetricsLog {
        run_experiment(&p.spec, &p.train, &p.test, &p.shards, cfg).unwrap().log
    }
}

/// `F = 1/2 * mean((w x - y)^2)` with a single weight.
pub struct ScalarRegression;

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
    fn param_vars(&self, tape: &mut Tape64, w: &ParamVec64) -> Result<Vec<Var>> {
        Ok(vec![tape.var(w.as_slice().to_vec(), 1, 1)?])
    }
    fn loss(&self, tape: &mut Tape64, params: &[Var], x: Var, y: Var) -> Result<Var> {
        let rows = tape.shape(x).rows;
        let pred = tape.matmul(x, params[0])?;
        let r = tape.sub(pred, y)?;
        let sq = tape.l2_norm_sq(r)?;
        tape.scale(sq, 0.5 / rows as f64)
    }
}
