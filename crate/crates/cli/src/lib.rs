//! Command-line shell around `cmm-core`: config files, checkpoints, results.

pub mod app;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod results;

pub use checkpoint::{Checkpoint, ModelState};
pub use config::CliConfig;
pub use error::{CliError, Result};
pub use results::ResultsDocument;
