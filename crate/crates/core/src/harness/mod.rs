//! Experiment orchestration, metrics and reference oracles.

pub mod experiment;
pub mod measurement;
pub mod metrics;
pub mod oracle;
pub mod verify;

pub use experiment::{run_experiment, ExperimentConfig, Metric, MetricReport};
