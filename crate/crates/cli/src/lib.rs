//! Operator surface for the separation runtime: scene simulation,
//! separation runs, evaluation and configuration management.

pub mod commands;
pub mod config;
mod error;
pub mod scene;

pub use error::{CliError, CliResult};
