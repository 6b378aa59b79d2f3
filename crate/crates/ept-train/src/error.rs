//! Training-harness error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    /// Invalid configuration or CLI input.
    #[error("config error: {0}")]
    Config(String),
    /// Error bubbled up from the adapter stack.
    #[error(transparent)]
    Core(#[from] ept_core::EptError),
    /// Training diverged; message carries the step and parameter norms.
    #[error("non-finite loss: {0}")]
    Diverged(String),
    /// Checkpoint blob or manifest failed validation.
    #[error("checkpoint integrity: {0}")]
    Integrity(String),
    /// Manifest disagrees with the expected tensor set.
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

impl TrainError {
    /// True for errors a caller caused (bad input), as opposed to runtime
    /// failures; the CLI maps these to exit code 2.
    pub fn is_validation(&self) -> bool {
        match self {
            TrainError::Config(_) => true,
            TrainError::Core(e) => matches!(
                e,
                ept_core::EptError::Parameter(_)
                    | ept_core::EptError::Contract(_)
                    | ept_core::EptError::Shape(_)
                    | ept_core::EptError::Capacity(_)
                    | ept_core::EptError::Index(_)
            ),
            _ => false,
        }
    }
}
