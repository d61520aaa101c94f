//! Federated learning pipeline simulator: TOML experiment configs, dataset
//! and result files, and the experiment runner behind the `flsim` CLI.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod formats;

pub use config::ExperimentConfig;
pub use experiment::{prepare, run_experiment, simulate, sweep, Prepared, RunOptions, RunOutput};
