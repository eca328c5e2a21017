//! Command implementations behind the `bitrobust` binary.

pub mod commands;
pub mod config;
pub mod error;

pub use config::{ExperimentConfig, Preset};
pub use error::CliError;
