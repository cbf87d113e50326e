//! Experiment configuration: a sectioned `key = value` file (TOML) plus
//! command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use fedcomp::{Activation, CompressorKind, SchedulerKind};

pub const SEED_ENV: &str = "FEDCOMP_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// CSV destination for `run`; stdout when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub federation: FederationConfig,
    pub compression: CompressionConfig,
    pub schedule: ScheduleConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub classes: usize,
    pub features: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub spread: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Synthetic,
            classes: 4,
            features: 20,
            train_per_class: 500,
            test_per_class: 250,
            spread: 0.5,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden layer widths; empty means multinomial logistic regression.
    pub hidden: Vec<usize>,
    pub activation: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![100],
            activation: "tanh".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub clients: usize,
    pub rounds: usize,
    /// Local SGD iterations K.
    pub local_iters: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Dirichlet concentration of the label split.
    pub alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clients_per_round: Option<usize>,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            clients: 10,
            rounds: 50,
            local_iters: 5,
            lr: 0.01,
            batch_size: 256,
            alpha: 1.0,
            clients_per_round: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressionConfig {
    pub uplink: String,
    pub downlink: String,
    pub double_way: bool,
    pub error_feedback: bool,
    /// Nominal per-round budget B in 32-bit scalars.
    pub budget: usize,
    /// Synthetic compressor iterations S.
    pub synth_iters: usize,
    pub lambda: f64,
    pub synth_lr: f64,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig {
            uplink: "synthetic".into(),
            downlink: "synthetic".into(),
            double_way: false,
            error_feedback: true,
            budget: 25,
            synth_iters: 10,
            lambda: 0.0,
            synth_lr: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: String,
    pub tau: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: "constant".into(),
            tau: 3.0,
        }
    }
}

fn positive(key: &str, v: usize) -> Result<()> {
    if v == 0 {
        bail!("{key} must be >= 1, got 0");
    }
    Ok(())
}

fn finite_non_negative(key: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v >= 0.0) {
        bail!("{key} must be finite and >= 0, got {v}");
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let f = &self.federation;
        positive("federation.clients (N)", f.clients)?;
        positive("federation.local_iters (K)", f.local_iters)?;
        positive("federation.batch_size", f.batch_size)?;
        finite_non_negative("federation.lr", f.lr)?;
        if !(f.alpha.is_finite() && f.alpha > 0.0) {
            bail!("federation.alpha must be positive and finite, got {}", f.alpha);
        }
        if let Some(m) = f.clients_per_round {
            if m == 0 || m > f.clients {
                bail!("federation.clients_per_round must be in 1..={}, got {m}", f.clients);
            }
        }
        let c = &self.compression;
        self.uplink()?;
        self.downlink()?;
        positive("compression.budget (B)", c.budget)?;
        positive("compression.synth_iters (S)", c.synth_iters)?;
        finite_non_negative("compression.lambda", c.lambda)?;
        finite_non_negative("compression.synth_lr", c.synth_lr)?;
        finite_non_negative("schedule.tau", self.schedule.tau)?;
        self.scheduler()?;
        self.activation()?;
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Synthetic => {
                if d.classes < 2 {
                    bail!("dataset.classes must be >= 2, got {}", d.classes);
                }
                positive("dataset.features", d.features)?;
                positive("dataset.train_per_class", d.train_per_class)?;
                positive("dataset.test_per_class", d.test_per_class)?;
                finite_non_negative("dataset.spread", d.spread)?;
            }
            DatasetKind::Idx => {
                for (key, v) in [
                    ("dataset.train_images", &d.train_images),
                    ("dataset.train_labels", &d.train_labels),
                    ("dataset.test_images", &d.test_images),
                    ("dataset.test_labels", &d.test_labels),
                ] {
                    if v.is_none() {
                        bail!("{key} is required when dataset.kind = \"idx\"");
                    }
                }
            }
        }
        if self.model.hidden.contains(&0) {
            bail!("model.hidden widths must be >= 1");
        }
        Ok(())
    }

    pub fn uplink(&self) -> Result<CompressorKind> {
        self.compression
            .uplink
            .parse()
            .map_err(|e| anyhow!("compression.uplink: {e}"))
    }

    pub fn downlink(&self) -> Result<CompressorKind> {
        self.compression
            .downlink
            .parse()
            .map_err(|e| anyhow!("compression.downlink: {e}"))
    }

    pub fn scheduler(&self) -> Result<SchedulerKind> {
        SchedulerKind::parse(&self.schedule.kind, self.schedule.tau).map_err(|e| anyhow!("schedule.kind: {e}"))
    }

    pub fn activation(&self) -> Result<Activation> {
        match self.model.activation.as_str() {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => bail!("model.activation: unknown activation `{other}` (expected tanh or relu)"),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Parses `raw` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies one `section.key=value` override to a raw table.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not of the form key=value"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override `{assignment}` has an empty key");
    }
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut node = table;
    for k in parents {
        node = node
            .entry(k.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("`{k}` in override `{assignment}` is not a section"))?;
    }
    node.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Builds a config from an optional file, `--set` overrides and the seed
/// environment variable, in that order of precedence (lowest first).
pub fn load_config(path: Option<&Path>, overrides: &[String], env_seed: Option<&str>) -> Result<ExperimentConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str::<Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(s) = env_seed {
        let seed: u64 = s
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV} must be an unsigned integer, got `{s}`"))?;
        table.insert("seed".into(), Value::Integer(seed as i64));
    }
    let cfg: ExperimentConfig = table.try_into().context("invalid configuration")?;
    cfg.validate()?;
    Ok(cfg)
}
