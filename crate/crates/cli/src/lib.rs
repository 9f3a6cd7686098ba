//! The `nanoctl` command line: dataset generation, training, sampling,
//! evaluation and cost reports, plus the run configuration and checkpoint
//! format they share.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod train;

pub use error::{CliError, Code, Result};
