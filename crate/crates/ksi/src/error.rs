//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KsiError {
    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input text, reported with a 1-based line number.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Data that parses but violates an invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Incompatible matrix/graph dimensions.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Corrupt or unsupported binary file.
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    /// Failure during an otherwise valid run (non-finite loss, …).
    #[error("runtime error: {0}")]
    Runtime(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl KsiError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        KsiError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        KsiError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// CLI exit code: 2 for usage/validation problems, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            KsiError::Config(_)
            | KsiError::Parse { .. }
            | KsiError::Validation(_)
            | KsiError::Shape(_)
            | KsiError::Format { .. } => 2,
            KsiError::Runtime(_) | KsiError::Io { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, KsiError>;
