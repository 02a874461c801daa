//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the identification and control pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Input dimensions do not agree (kernel evaluation, model conditioning).
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    /// A matrix factorisation or evaluation produced non-finite or
    /// indefinite results even after jitter escalation.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Hyperparameter search could not produce a finite objective.
    #[error("optimization failed: {0}")]
    Optimization(String),

    /// A log-normal observation with a nonpositive value; the caller is
    /// expected to count and discard it.
    #[error("invalid observation: nonpositive value {0}")]
    InvalidObservation(f64),

    /// The adaptive integrator could not advance (step-size underflow).
    #[error("integration stalled at t = {time_reached}: {reason}")]
    Integration { time_reached: f64, reason: String },

    /// A derivative-estimation window with invalid timestamps.
    #[error("invalid sample window: {0}")]
    Window(String),

    /// The posterior input-function matrix is too ill-conditioned to invert.
    #[error("input matrix ill-conditioned: condition number {0:.3e}")]
    Conditioning(f64),

    /// Bad experiment configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
