//! Command-line pipeline over the `voljepa` library: corpus generation,
//! preprocessing, pretraining, probing, evaluation and latent-space tools.

pub mod cli;
pub mod config;
pub mod error;
pub mod run;
pub mod stages;

pub use error::{CliError, Result};
