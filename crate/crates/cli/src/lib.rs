//! Library surface of the `attnrl` binary: configuration loading and the
//! command implementations, exposed so integration tests can drive them
//! directly.

pub mod commands;
pub mod config;

use std::fmt;

/// Command failures mapped to process exit codes:
/// 2 config error, 3 numerical divergence, 4 oracle/verification failure.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Divergence(String),
    OracleFailure(String),
    Other(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::OracleFailure(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Divergence(m) => write!(f, "numerical divergence: {m}"),
            CliError::OracleFailure(m) => write!(f, "verification failure: {m}"),
            CliError::Other(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<attnrl_core::Error> for CliError {
    fn from(e: attnrl_core::Error) -> Self {
        match e {
            attnrl_core::Error::NumericalDivergence(m) => CliError::Divergence(m),
            other => CliError::Other(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}
