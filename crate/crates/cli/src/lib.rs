//! Command-line driver: configuration, data generation, federated
//! pre-training, fine-tuning, evaluation and the verification suite.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::*;
pub use config::{Overrides, RunConfig};
pub use error::CliError;
