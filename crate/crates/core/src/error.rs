use std::path::PathBuf;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by `{op}`{}", .step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { op: String, step: Option<usize> },

    #[error("invalid checkpoint {path:?}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn non_finite(op: impl Into<String>) -> Self {
        Error::NonFinite {
            op: op.into(),
            step: None,
        }
    }

    pub(crate) fn dims(expected: usize, got: usize) -> Self {
        Error::DimensionMismatch { expected, got }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
