//! Error taxonomy shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Tensor or table dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Well-shaped input carrying an invalid value (NaN, non-positive score, ...).
    #[error("value error: {0}")]
    Value(String),

    /// A stated precondition was violated by the caller.
    #[error("precondition error: {0}")]
    Precondition(String),

    /// Operation evaluated at a singular point (e.g. zero mask mass).
    #[error("singularity error: {0}")]
    Singular(String),

    /// A log/exp blew up; carries the offending position when known.
    #[error("overflow error at position {position}: {what}")]
    Overflow { position: usize, what: String },

    /// Inconsistent or incomplete configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite number surfaced mid-computation.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed persisted artifact (checkpoint, header, ...).
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
