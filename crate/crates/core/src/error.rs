use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the calibration engine and its supporting modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An evaluation threshold outside the region where an objective is defined.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate null hypothesis: beta_null = {0} must lie strictly inside (0, 1)")]
    DegenerateNull(f64),

    #[error("Beta({a}, {b}) has an unbounded density; both shapes must be >= 1")]
    UnboundedDensity { a: f64, b: f64 },

    #[error("regime error: {0}")]
    Regime(String),

    /// A weight function that carries no risk-control guarantee (VaR) was used
    /// where one is required.
    #[error("guarantee mode: {0}")]
    GuaranteeMode(String),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("line {line}: {message}")]
    Validation { line: u64, message: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("trajectory {index} failed: {source}")]
    Trajectory {
        index: usize,
        completed: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid_param(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

pub(crate) fn invalid_input(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
