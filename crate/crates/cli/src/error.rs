use std::path::{Path, PathBuf};

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

/// Exit status for failures caused by the caller (arguments, config, input files).
pub const EXIT_USER: u8 = 1;
/// Exit status for internal faults (numerical blow-ups, bugs).
pub const EXIT_INTERNAL: u8 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: invalid configuration: {message}")]
    Config { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] e2gan_core::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } | CliError::Io { .. } => EXIT_USER,
            CliError::Core(e) if e.is_user_error() => EXIT_USER,
            CliError::Core(_) | CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Internal(format!("serialization: {e}"))
    }
}
