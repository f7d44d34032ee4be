//! Config-driven experiment runner behind the `ibmd` binary.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{load_config, parse_config, ExperimentConfig};
pub use pipeline::{run, Command, RunSummary};
