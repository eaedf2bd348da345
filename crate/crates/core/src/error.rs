use thiserror::Error;

use crate::mdp::{QTable, ValidationReport};

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: String, actual: String },

    #[error("invalid MDP: {0}")]
    InvalidMdp(ValidationReport),

    /// Carries the last iterate so callers can still inspect it.
    #[error("no convergence after {iterations} iterations (last step {last_step:e})")]
    NonConvergence {
        iterations: usize,
        last_step: f64,
        last: Box<QTable>,
    },

    #[error("malformed MDP document: {0}")]
    Document(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param(msg: impl Into<String>) -> Error {
    Error::Parameter(msg.into())
}

pub(crate) fn dims(expected: (usize, usize), actual: (usize, usize)) -> Error {
    Error::Dimension {
        expected: format!("{}x{}", expected.0, expected.1),
        actual: format!("{}x{}", actual.0, actual.1),
    }
}
