use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] lara_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed tensor file at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INVALID_ARGS: i32 = 2;
    pub const NUMERICAL: i32 = 3;
    pub const IO: i32 = 4;
}

impl HarnessError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        HarnessError::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Core(e) if e.is_numerical() => exit::NUMERICAL,
            HarnessError::Core(_) | HarnessError::Parse { .. } | HarnessError::InvalidArgument(_) => {
                exit::INVALID_ARGS
            }
            HarnessError::Json(e) if e.is_io() => exit::IO,
            HarnessError::Json(_) => exit::INVALID_ARGS,
            HarnessError::Csv(_) | HarnessError::Io { .. } => exit::IO,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        let numerical = HarnessError::from(lara_core::Error::DegenerateDenominator {
            query: 0,
            magnitude: 0.0,
        });
        assert_eq!(numerical.exit_code(), exit::NUMERICAL);
        let overflow = HarnessError::from(lara_core::Error::Overflow {
            exponent: 800.0,
            limit: 700.0,
        });
        assert_eq!(overflow.exit_code(), exit::NUMERICAL);
        let shape = HarnessError::from(lara_core::Error::DimensionMismatch { expected: 2, actual: 3 });
        assert_eq!(shape.exit_code(), exit::INVALID_ARGS);
        assert_eq!(HarnessError::invalid("x").exit_code(), exit::INVALID_ARGS);
        let io = HarnessError::io("p", std::io::Error::other("boom"));
        assert_eq!(io.exit_code(), exit::IO);
    }
}
