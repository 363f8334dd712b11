use thiserror::Error;

/// Errors raised by the estimators and their numerical building blocks.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    /// A feature-map exponent exceeded the overflow guard.
    #[error("exponent {exponent:.6e} exceeds the overflow guard of {limit}")]
    Overflow { exponent: f64, limit: f64 },

    #[error("degenerate denominator {magnitude:.3e} for query {query}")]
    DegenerateDenominator { query: usize, magnitude: f64 },

    /// Every proposal density underflows at the probe point.
    #[error("all proposal densities underflow at the probe point (max log-density {max_logpdf:.3e})")]
    DegeneratePoint { max_logpdf: f64 },

    #[error("internal numerical error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures caused by the numbers rather than by the caller's arguments.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Overflow { .. }
                | Error::DegenerateDenominator { .. }
                | Error::DegeneratePoint { .. }
                | Error::Internal(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
