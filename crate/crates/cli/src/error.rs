use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Everything that stops a command, grouped by exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Unreadable or invalid configuration. Exit status 2.
    #[error("config error: {0}")]
    Config(String),
    /// A run finished but broke one of its own invariants. Exit status 3.
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Invariant(_) => 3,
            CliError::Output { .. } => 1,
        }
    }
}

impl From<dllm_cache::Error> for CliError {
    fn from(e: dllm_cache::Error) -> Self {
        match e {
            dllm_cache::Error::Config(msg) => CliError::Config(msg),
            other => CliError::Invariant(other.to_string()),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
