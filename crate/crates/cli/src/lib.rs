//! Experiment runner for `cdecay`: JSON configs, per-seed run directories,
//! and the train / eval / quantize / diagnose / gradcheck / sweep commands.

pub mod config;
pub mod diagnose;
pub mod error;
pub mod run;
pub mod sweep;

pub use config::{load_config, ExperimentConfig};
pub use error::{CliError, CliResult};
