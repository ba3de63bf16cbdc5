//! Experiment runner for retrieval-augmented charge prediction.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
