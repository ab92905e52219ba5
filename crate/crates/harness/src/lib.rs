//! Training, evaluation, comparison architectures, sweeps, and cost
//! accounting around `mist-core`.

pub mod baselines;
pub mod config;
pub mod cost;
pub mod error;
pub mod model;
pub mod optim;
pub mod sweep;
pub mod train;

pub use config::{Ablation, ModelKind, TrainConfig};
pub use cost::{cost_estimate, CostReport};
pub use error::{HarnessError, Result};
pub use model::Model;
pub use train::{evaluate, train, EvalReport, MetricsLog, MetricsRow};
pub use sweep::{sweep, Axis, SweepRow};
