//! Error metrics, timing, increment fields and the experiment runner.

pub mod config;
pub mod increments;
pub mod metrics;
pub mod runner;
pub mod timing;

pub use config::{ExperimentConfig, PRESETS};
pub use increments::{increment_field, IncrementField};
pub use metrics::{integrated_l2, per_step_error, ErrorReport};
pub use runner::{run_experiment, ReportBundle};
pub use timing::time_execution;
