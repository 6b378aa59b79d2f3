//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by the adapter stack.
#[derive(Debug, Error)]
pub enum EptError {
    /// Incompatible tensor shapes; the message names both shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// An argument is outside its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),
    /// A non-finite value or other numeric failure.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// An API contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A slice request exceeds the subspace capacity.
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    /// An index is out of range.
    #[error("index out of range: {0}")]
    Index(String),
    /// Input is degenerate for the requested operation.
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, EptError>;
