//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model construction, oracles, and the experiment driver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid distribution at {location}: {reason}")]
    InvalidDistribution { location: String, reason: String },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("empty data batch")]
    EmptyData,

    #[error("trajectories were executed under different policies (ids {0} and {1})")]
    MixedPolicies(u64, u64),

    #[error("missing layer {layer}: {what}")]
    MissingLayer { layer: usize, what: &'static str },

    #[error("enumeration would produce {size} outcomes, above the cap {cap}")]
    EnumerationCapExceeded { size: u128, cap: u128 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("serialization: {0}")]
    Serialization(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
