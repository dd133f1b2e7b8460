use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {actual}")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("spectral norm iteration did not converge after {iterations} iterations (best estimate {estimate})")]
    NotConverged { iterations: usize, estimate: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("calibration target is infeasible: {0}")]
    Infeasible(String),

    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroRow { row: usize },

    #[error("slack buffer has {have} samples, {need} required")]
    InsufficientSamples { have: usize, need: usize },
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
