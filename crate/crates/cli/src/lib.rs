//! Experiment orchestration for the `memaudit` command-line tool.

pub mod config;
pub mod experiment;
pub mod report;
pub mod synth;

pub use config::ExperimentConfig;
pub use experiment::{run_experiment, ExperimentError, SeedRun};
pub use report::RunSummary;
