//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any spectradiff operation.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violated a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor or layer shapes are incompatible.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A data file could not be parsed.
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// A data file is structurally invalid (bad header, non-ascending grid, ...).
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    /// Underlying I/O failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Training diverged or produced non-finite values.
    #[error("training error: {0}")]
    Training(String),

    /// Reverse-diffusion sampling produced a non-finite intermediate.
    #[error("sampling error at step t={step}: {message}")]
    Sampling { step: usize, message: String },

    /// A checkpoint file is malformed or of the wrong kind.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A model or layer configuration is invalid.
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
