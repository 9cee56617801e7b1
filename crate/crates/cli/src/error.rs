use std::path::PathBuf;

use gee_core::GeeError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] GeeError),

    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },

    #[error("{0}")]
    Schema(String),

    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: u64,
        column: String,
        message: String,
    },

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Io { .. } => "io",
            CliError::Schema(_) => "schema",
            CliError::Parse { .. } => "parse",
            CliError::Usage(_) => "usage",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }

    /// Single-line `{"error": kind, "detail": message}` object.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "detail": self.to_string() }).to_string()
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
