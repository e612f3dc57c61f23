//! Failures and the exit codes they map to.

use std::fmt;
use std::path::Path;

/// 0 pass, 1 threshold failure, 2 config error, 3 I/O or corruption.
#[derive(Debug)]
pub enum CliError {
    /// A check ran and failed, or training diverged.
    Failed(String),
    Config(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Failed(m) => write!(f, "failed: {m}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Core errors surface as failed runs unless the caller knows better.
impl From<mofu_core::Error> for CliError {
    fn from(e: mofu_core::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Tags a core error from validating user settings as a config error.
pub fn config_err(e: mofu_core::Error) -> CliError {
    CliError::Config(e.to_string())
}
