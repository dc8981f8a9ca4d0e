use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the detection and attribution pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("cannot score interval: {0}")]
    Scoring(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid synthetic spec: {0}")]
    Spec(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }

    /// True for errors caused by user input (bad files, flags, specs) rather
    /// than by the numerics.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Parse { .. } | Error::Config(_) | Error::Spec(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
