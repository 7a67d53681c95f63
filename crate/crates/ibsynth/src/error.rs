//! Crate-wide error type with an exit-code mapping for the CLI.

use std::path::PathBuf;

/// Every fallible operation in this crate returns this error.
///
/// The CLI maps `Config` errors to exit code 1 and everything else to exit
/// code 2 (run error, partial results preserved on disk).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate id '{id}' in {path} (lines {first_line} and {second_line})")]
    DuplicateId {
        path: PathBuf,
        id: String,
        first_line: usize,
        second_line: usize,
    },

    #[error("no concept set for label '{label}'")]
    UnknownLabel { label: String },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("embedding error: {0}")]
    Embed(String),

    #[error("provider '{provider}' failed: {message}")]
    Provider { provider: String, message: String },

    #[error("cache error: {0}")]
    Cache(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),
}

impl Error {
    /// Convenience constructor for I/O errors tagged with the offending path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
