//! Experiment harness for `l2o-core`: synthetic data, the
//! train/infer/certify pipeline, run artifacts and reports.

pub mod config;
pub mod data;
pub mod experiment;
pub mod formats;
pub mod report;
pub mod rng;

pub use config::{ExperimentConfig, ExperimentKind};
pub use experiment::{run_experiment, run_stage, Stage, StageError};
pub use report::RunReport;
