//! Experiment plumbing for the `tmcl-lab` binary: configuration files, run
//! records, reports and the verification suite.

pub mod config;
pub mod error;
pub mod record;
pub mod report;
pub mod stats;
pub mod svg;
pub mod verify;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use record::{execute, RunRecord};
