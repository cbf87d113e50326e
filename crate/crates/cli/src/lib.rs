//! Front end for the `fedcomp` binary: config loading and subcommands.

pub mod config;

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

use fedcomp::compressors::{compress, CompressionContext, SyntheticPrior};
use fedcomp::data::{class_histograms, load_idx};
use fedcomp::scheduler::BudgetPlan;
use fedcomp::seed::{self, STAGE_DATA, STAGE_INIT, STAGE_PARTITION, STAGE_SYNTH_INIT, STAGE_TEST_DATA};
use fedcomp::{
    compression_efficiency, compression_ratio, dirichlet_partition, gen_synthetic, run_experiment, ClientShard,
    CompressorKind, Dataset64, LocalTrainConfig, ModelSpec, ParamVec64, RoundConfig64, SynthSettings,
};

pub use config::{load_config, ExperimentConfig};

/// Everything needed to start a run.
pub struct Setup {
    pub spec: ModelSpec,
    pub train: Dataset64,
    pub test: Dataset64,
    pub shards: Vec<ClientShard>,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset64, Dataset64)> {
    let d = &cfg.dataset;
    match d.kind {
        config::DatasetKind::Synthetic => Ok((
            gen_synthetic(d.classes, d.features, d.train_per_class, d.spread, seed::derive(cfg.seed, STAGE_DATA))?,
            gen_synthetic(d.classes, d.features, d.test_per_class, d.spread, seed::derive(cfg.seed, STAGE_TEST_DATA))?,
        )),
        config::DatasetKind::Idx => {
            // validate() guarantees the paths are present
            let p = |o: &Option<std::path::PathBuf>| o.clone().expect("validated path");
            let train = load_idx(&p(&d.train_images), &p(&d.train_labels))?;
            let test = load_idx(&p(&d.test_images), &p(&d.test_labels))?;
            if train.dim != test.dim {
                bail!("train images have {} pixels, test images {}", train.dim, test.dim);
            }
            Ok((train, test))
        }
    }
}

pub fn model_spec(cfg: &ExperimentConfig, features: usize, classes: usize) -> Result<ModelSpec> {
    let spec = if cfg.model.hidden.is_empty() {
        ModelSpec::logreg(features, classes)
    } else {
        let mut layers = vec![features];
        layers.extend(&cfg.model.hidden);
        layers.push(classes);
        ModelSpec::mlp(layers, cfg.activation()?)
    };
    spec.validate()?;
    Ok(spec)
}

pub fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let (train, test) = load_data(cfg)?;
    let classes = train.classes.max(test.classes);
    let spec = model_spec(cfg, train.dim, classes)?;
    let shards = dirichlet_partition(
        &train,
        cfg.federation.clients,
        cfg.federation.alpha,
        seed::derive(cfg.seed, STAGE_PARTITION),
    )?;
    Ok(Setup {
        spec,
        train,
        test,
        shards,
    })
}

pub fn synth_settings(cfg: &ExperimentConfig) -> SynthSettings<f64> {
    SynthSettings {
        iters: cfg.compression.synth_iters,
        lambda: cfg.compression.lambda,
        lr: cfg.compression.synth_lr,
        ..SynthSettings::default()
    }
}

pub fn round_config(cfg: &ExperimentConfig) -> Result<RoundConfig64> {
    let f = &cfg.federation;
    Ok(RoundConfig64 {
        rounds: f.rounds,
        local: LocalTrainConfig {
            lr: f.lr,
            steps: f.local_iters,
            batch_size: f.batch_size,
        },
        uplink: cfg.uplink()?,
        downlink: cfg.downlink()?,
        double_way: cfg.compression.double_way,
        error_feedback: cfg.compression.error_feedback,
        synth: synth_settings(cfg),
        plan: BudgetPlan::new(cfg.scheduler()?, cfg.compression.budget, f.rounds, f.clients)?,
        clients_per_round: f.clients_per_round,
        seed: cfg.seed,
    })
}

/// Runs the experiment; returns the metrics CSV and the final weights.
pub fn run(cfg: &ExperimentConfig) -> Result<(String, ParamVec64)> {
    let s = setup(cfg)?;
    let res = run_experiment(&s.spec, &s.train, &s.test, &s.shards, round_config(cfg)?)?;
    Ok((res.log.to_csv(), res.server.global))
}

/// Per-client class counts as CSV: `client,total,class_0,...`.
pub fn partition_report(cfg: &ExperimentConfig) -> Result<String> {
    let s = setup(cfg)?;
    let hist = class_histograms(&s.train, &s.shards);
    let mut out = String::from("client,total");
    for c in 0..s.train.classes {
        write!(out, ",class_{c}")?;
    }
    out.push('\n');
    for (i, h) in hist.iter().enumerate() {
        write!(out, "{i},{}", h.iter().sum::<usize>())?;
        for n in h {
            write!(out, ",{n}")?;
        }
        out.push('\n');
    }
    Ok(out)
}

/// The budget schedule seen by `client`, as `t,budget` CSV.
pub fn schedule_report(cfg: &ExperimentConfig, client: usize) -> Result<String> {
    let f = &cfg.federation;
    if client >= f.clients {
        bail!("client {client} out of range (federation.clients = {})", f.clients);
    }
    let plan = BudgetPlan::new(cfg.scheduler()?, cfg.compression.budget, f.rounds, f.clients)?;
    let mut out = String::from("t,budget\n");
    for t in 0..plan.rounds() {
        writeln!(out, "{t},{}", plan.budget(t, client))?;
    }
    Ok(out)
}

/// Writes one value per line; `f64` display output parses back exactly.
pub fn save_vector(path: &Path, v: &ParamVec64) -> Result<()> {
    let mut text = String::with_capacity(v.dim() * 20);
    for x in v.as_slice() {
        writeln!(text, "{x}")?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn load_vector(path: &Path) -> Result<ParamVec64> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let values = text
        .split_whitespace()
        .enumerate()
        .map(|(i, tok)| {
            tok.parse::<f64>()
                .with_context(|| format!("{}: entry {i} `{tok}` is not a number", path.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        bail!("{}: no values", path.display());
    }
    Ok(ParamVec64::from_vec(values))
}

/// Compresses `target` once and reports cost, ratio and efficiency.
///
/// The synthetic compressor uses the configured model at its seeded
/// initial weights as the prior.
pub fn bench_compressor(cfg: &ExperimentConfig, target: &ParamVec64, kind: CompressorKind, budget: usize) -> Result<String> {
    let d = &cfg.dataset;
    let spec = model_spec(cfg, d.features, d.classes)?;
    let w: ParamVec64 = spec.init_params(seed::derive(cfg.seed, STAGE_INIT));
    let prior = SyntheticPrior {
        model: &spec,
        weights: &w,
        settings: synth_settings(cfg),
        seed: seed::derive(cfg.seed, STAGE_SYNTH_INIT),
    };
    if kind == CompressorKind::Synthetic && target.dim() != spec.dim() {
        bail!(
            "vector has {} entries but the configured model has {} parameters",
            target.dim(),
            spec.dim()
        );
    }
    let ctx = CompressionContext {
        budget,
        prior: Some(prior),
    };
    let c = compress(kind, target, &ctx)?;
    let cost = c.payload.cost();
    let eff = compression_efficiency(&c.reconstruction, target)?;
    let ratio = if cost == 0 {
        "inf".to_string()
    } else {
        compression_ratio(target.dim(), cost)?.to_string()
    };
    Ok(format!(
        "compressor,budget,dim,cost,ratio,efficiency\n{kind},{budget},{},{cost},{ratio},{}\n",
        target.dim(),
        eff.value
    ))
}
