//! Experiment driver: JSON configs, the `train`/`eval`/`masks`/`gradcheck`
//! subcommands, and their file artifacts.

pub mod commands;
pub mod config;
pub mod error;
pub mod pgm;

pub use config::ExperimentConfig;
pub use error::CliError;
