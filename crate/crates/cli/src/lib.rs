//! Operator surface for `tapfuse`: run configuration, the five subcommands
//! and their exit-code classification. `main.rs` is a thin clap wrapper over
//! the functions in [`commands`].

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{BenchReport, Manifest, TrackInputs};
pub use config::{ConfigError, QuerySource, RunConfig};
pub use error::CliError;

/// Reads and parses `path`, or returns the defaults when `path` is `None`.
pub fn load_config(path: Option<&std::path::Path>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| ConfigError::Unreadable {
            path: p.display().to_string(),
            reason: e.to_string(),
        })?,
        None => String::new(),
    };
    Ok(RunConfig::parse(&text, seed)?)
}
