//! Command-line surface: data generation, training, evaluation, inference
//! heatmaps and frequency-split inspection.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
