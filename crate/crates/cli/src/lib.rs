//! Batch experiment runner: strict TOML configuration, seeded runs, sweeps,
//! component ablations, and re-summarization of existing artifacts.

pub mod config;
pub mod runner;
pub mod summary;

pub use config::ExperimentConfig;
pub use runner::{ablate_command, report_command, run_command, sweep_command, RunOptions};
pub use stamp_core::{Error, Result};
