//! Error type shared by all modules of the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed input record; `row` is the 1-based data row (header excluded).
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("duplicate record for (unit={unit}, period={period}, indicator={indicator})")]
    DuplicateRecord {
        unit: String,
        period: i64,
        indicator: String,
    },

    /// Problem tied to one named indicator (too few observations, zero variance, ...).
    #[error("indicator '{name}': {message}")]
    Indicator { name: String, message: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("perfect separation on covariate '{covariate}'")]
    PerfectSeparation { covariate: String },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("coverage mismatch between risk tables: {0}")]
    CoverageMismatch(String),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub fn indicator(name: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Indicator {
            name: name.into(),
            message: message.into(),
        }
    }
}
