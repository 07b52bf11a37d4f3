//! Library side of the `slabfv` command: configuration and the subcommands,
//! usable from tests without spawning a process.

pub mod commands;
pub mod config;

pub use commands::{consistency_study, refine_study, run, verify_operators, Outcome};
pub use config::RunConfig;

use thiserror::Error;

/// Failure classes of the command line, each with its exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Solver(_) => 3,
            CliError::Verification(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<slabfv_core::Error> for CliError {
    fn from(e: slabfv_core::Error) -> Self {
        match e {
            slabfv_core::Error::Io(m) => CliError::Io(m),
            slabfv_core::Error::NonConvergence { .. }
            | slabfv_core::Error::PositivityLoss { .. }
            | slabfv_core::Error::LinearSolve(_) => CliError::Solver(e.to_string()),
            other => CliError::Config {
                key: "<input>".into(),
                message: other.to_string(),
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
