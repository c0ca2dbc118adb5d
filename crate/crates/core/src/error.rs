//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimensions do not match what an operation requires.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value is missing, unknown, or out of range.
    /// Carries the `section.key` path when one is known.
    #[error("config error: {0}")]
    Config(String),

    /// Scene entities cannot be placed disjointly under the given config.
    #[error("placement error: {0}")]
    Placement(String),

    /// Mask-cache session contract violated (non-decreasing step index).
    #[error("session error: {0}")]
    Session(String),

    /// A loss or latent became non-finite. Carries diagnostic context.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Container or checkpoint bytes do not parse.
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    /// Process exit code for the CLI surface.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Session(_) | Error::Placement(_) => 2,
            Error::Numeric(_) => 3,
            Error::Io(_) | Error::Format(_) => 4,
            Error::Shape(_) => 2,
        }
    }
}
