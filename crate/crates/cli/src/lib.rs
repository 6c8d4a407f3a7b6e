//! Command-line front end: synthetic data, training, evaluation and ablations.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;

pub use commands::{cmd_ablate, cmd_eval, cmd_synth, cmd_train, resolve, Overrides};
pub use config::RunConfig;
pub use error::{exit, CliError, CliResult};
