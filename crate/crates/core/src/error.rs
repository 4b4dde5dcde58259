use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("non-finite loss at {stage} {index}")]
    Diverged { stage: &'static str, index: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("malformed {format} at byte {offset}: {reason}")]
    Format {
        format: &'static str,
        offset: usize,
        reason: String,
    },

    #[error("bundle tensor `{name}`: {reason}")]
    Bundle { name: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::UnknownPrimitive(_) => ErrorCategory::Usage,
            Error::NonFinite { .. } | Error::Diverged { .. } | Error::NonScalarLoss(_) => {
                ErrorCategory::Numeric
            }
            _ => ErrorCategory::Data,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
