use thiserror::Error;

use crate::io::FormatError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("singular geotransform (determinant {0})")]
    SingularTransform(f64),

    #[error("footprint out of bounds")]
    FootprintOutOfBounds,

    #[error("shape mismatch: expected {expected}, got {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("non-finite loss {loss} at epoch {epoch}, step {step}; learning rate {learning_rate} is likely too high, try reducing it by 10x")]
    NonFiniteLoss {
        loss: f64,
        epoch: usize,
        step: usize,
        learning_rate: f64,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Format(#[from] FormatError),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "config",
            Error::SingularTransform(_) => "singular_transform",
            Error::FootprintOutOfBounds => "footprint_out_of_bounds",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::InvalidInput(_) => "input",
            Error::Format(FormatError::Io { .. }) => "io",
            Error::Format(_) => "format",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(FormatError::Json(e))
    }
}
