//! Error type shared across the core modules.

use alloc::string::String;
use core::fmt;

/// Failure raised by core operations.
///
/// Each variant corresponds to one class of contract violation; the payload
/// is a human-readable description of what was violated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Incompatible matrix or vector dimensions.
    Shape(String),
    /// Non-finite values or a numeric breakdown mid-computation.
    Numeric(String),
    /// An argument outside its documented range.
    Argument(String),
    /// A value outside the mathematical domain of the operation.
    Domain(String),
    /// Structural validation of an input object failed.
    Validation(String),
    /// Operation invoked in a state that does not support it.
    State(String),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::Argument(_) => "argument",
            Error::Domain(_) => "domain",
            Error::Validation(_) => "validation",
            Error::State(_) => "state",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Error::Shape(m)
            | Error::Numeric(m)
            | Error::Argument(m)
            | Error::Domain(m)
            | Error::Validation(m)
            | Error::State(m) => m,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.kind(), self.message())
    }
}

impl core::error::Error for Error {}
