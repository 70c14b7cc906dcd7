//! Command surface for cohort generation, training, evaluation, transfer
//! experiments and the perturbation probe, with checkpoints and manifests.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod manifest;

pub use error::{CliError, CliResult};
