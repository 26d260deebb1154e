use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A forward or backward pass produced a NaN or infinity.
    #[error("non-finite value produced by `{op}` (node {node})")]
    NumericFailure { op: &'static str, node: usize },

    #[error("verification oracle refused: dimension {dim} exceeds cap {cap}")]
    OracleCapExceeded { dim: usize, cap: usize },

    #[error("noise calibration failed: {reason} (sigma bracket [{lo}, {hi}], {iterations} iterations)")]
    Calibration {
        reason: String,
        lo: f64,
        hi: f64,
        iterations: usize,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}
