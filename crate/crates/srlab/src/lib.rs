//! Standard-library companion to `srlab-core`: file formats, the
//! external-policy adapter, experiment plumbing and the `srlab` command.

pub mod cli;
pub mod commands;
pub mod error;
pub mod experiment;
pub mod external;
pub mod formats;

pub use error::{Error, Result};
pub use srlab_core as core;

use clap::Parser;

/// Parses `argv` (program name first) and runs it. Errors are returned,
/// not printed. Manifests record `argv` without the program name.
pub fn run_argv(argv: &[String]) -> Result<(), RunError> {
    let cli = cli::Cli::try_parse_from(argv).map_err(RunError::Usage)?;
    commands::run(cli, argv.get(1..).unwrap_or_default()).map_err(RunError::Failed)
}

#[derive(Debug)]
pub enum RunError {
    Usage(clap::Error),
    Failed(Error),
}

/// `{"error":{"kind":..,"message":..}}` for stderr.
pub fn error_json(kind: &str, message: &str) -> String {
    serde_json::json!({"error": {"kind": kind, "message": message}}).to_string()
}
