//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    /// A precondition on an operation's inputs was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// Explicit time integration produced a non-finite or runaway state.
    #[error("unstable integration at step {step} (node {node}, value {value})")]
    UnstableIntegration { step: usize, node: usize, value: f64 },

    /// A kernel or covariance matrix could not be factorized.
    #[error("conditioning failure: {0}")]
    Conditioning(String),

    /// Otsu thresholding on a constant field. Carries the RMSE that could
    /// still be computed so callers can report a partial result.
    #[error("no threshold: estimated field is constant (rmse {rmse})")]
    NoThreshold { rmse: f64 },

    /// An artifact was produced on a different mesh than the one in use.
    #[error("mesh fingerprint mismatch: artifact has {artifact}, current mesh is {mesh}")]
    FingerprintMismatch { artifact: String, mesh: String },

    #[error("malformed file {path}: {detail}")]
    Malformed { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CoreError::InvalidInput(msg.into())
    }

    pub fn malformed(path: impl Into<String>, detail: impl Into<String>) -> Self {
        CoreError::Malformed {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
