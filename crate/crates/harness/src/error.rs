//! Harness error type with CLI exit-code categories.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Core(#[from] d3moe_core::Error),
}

impl Error {
    /// CLI exit category: config=2, numeric=3, io=4.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) => 3,
            Error::Io(_) => 4,
            Error::Core(core) => match core {
                d3moe_core::Error::Io(_) | d3moe_core::Error::Format(_) => 4,
                d3moe_core::Error::Config(_) => 2,
                _ => 3,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
