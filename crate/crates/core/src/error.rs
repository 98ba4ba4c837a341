//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any promptseg operation.
#[derive(Debug, Error)]
pub enum Error {
    /// A mask that must contain foreground pixels is empty.
    #[error("empty mask: {0}")]
    EmptyMask(&'static str),

    /// Tensor or grid shapes do not line up.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// A configuration value violates an invariant.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A bounding box violates its invariants.
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A file or text block failed to parse; names the offending field.
    #[error("parse error at {field}: {message}")]
    Parse { field: String, message: String },

    /// Input data failed validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// Two keyed collections that must share keys do not.
    #[error("key mismatch: {0}")]
    KeyMismatch(String),

    /// Training hit a non-finite loss; the message names the batch for replay.
    #[error("training aborted on non-finite loss: {0}")]
    NanLoss(String),

    /// The synthetic generator could not place a feasible geometry.
    #[error("infeasible geometry for sample {index} after {attempts} attempts")]
    Infeasible { index: u64, attempts: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for CLI reporting: 1 for validation-class errors,
    /// 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::NanLoss(_) | Error::Infeasible { .. } => 2,
            _ => 1,
        }
    }

    pub(crate) fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub(crate) fn parse(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
