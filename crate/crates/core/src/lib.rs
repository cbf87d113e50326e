//! Deterministic federated-learning simulator with gradient compression.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to one precision. The simulator itself runs on `f64`.

pub mod autodiff;
pub mod compressors;
pub mod data;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod models;
pub mod scalar;
pub mod scheduler;
pub mod seed;

pub use compressors::{compress, decompress, CompressorKind, ErrorState, Payload, SynthSettings};
pub use data::{dirichlet_partition, gen_synthetic, ClientShard, Dataset};
pub use error::{Error, Result};
pub use federation::{run_experiment, Federation, RoundConfig};
pub use metrics::{compression_efficiency, compression_ratio, MetricsLog};
pub use models::{Activation, LocalTrainConfig, ModelSpec, ParamVector};
pub use scalar::Scalar;
pub use scheduler::{BudgetPlan, BudgetSchedule, SchedulerKind};

pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type ParamVec64 = ParamVector<f64>;
pub type ParamVec32 = ParamVector<f32>;
pub type Dataset64 = Dataset<f64>;
pub type Dataset32 = Dataset<f32>;
pub type Payload64 = Payload<f64>;
pub type RoundConfig64 = RoundConfig<f64>;
