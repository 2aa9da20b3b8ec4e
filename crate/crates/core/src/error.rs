//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes do not conform (non-square input, mismatched block sizes, ...).
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A structured input file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// A parsed problem violates an invariant of the schema.
    #[error("validation error: {0}")]
    Validation(String),

    /// A matrix that must be invertible is singular to working precision.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// The symmetric eigen-iteration failed to converge.
    #[error("eigendecomposition did not converge for matrix {0}")]
    EigenFailure(String),

    /// An operation was called outside its contract.
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
