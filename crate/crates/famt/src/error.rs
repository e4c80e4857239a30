//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible; the message names both shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A configuration value or argument is outside its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),
    /// Input is degenerate (all-zero weights, zero-norm tokens, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),
    /// An API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),
    /// A file or byte stream does not match its declared format.
    #[error("format error: {0}")]
    Format(String),
    /// A computation produced or received non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
