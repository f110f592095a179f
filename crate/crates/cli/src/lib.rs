//! Configuration, orchestration, persistence and reporting for `itergrid` experiments.

pub mod config;
pub mod error;
pub mod report;
pub mod runner;
pub mod stats;

pub use config::{parse_config, parse_str, ExperimentConfig, ExperimentKind};
pub use error::{CliError, Result};
pub use runner::{run, RunOptions};
pub use stats::Summary;
