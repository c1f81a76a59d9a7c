//! Error type shared by every module.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint/config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid gradient check: {0}")]
    InvalidCheck(String),

    /// Training hit a non-finite loss; carries the last finite checkpoint.
    #[error("training diverged at step {step}: {msg}")]
    Diverged {
        step: u64,
        msg: String,
        last_good: Box<crate::trainer::Checkpoint>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Process exit categories used by the command-line front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numeric,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Usage => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numeric => 4,
        }
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::ConfigMismatch(_) => ErrorCategory::Usage,
            Error::NonFinite(_) | Error::InvalidCheck(_) | Error::Diverged { .. } => ErrorCategory::Numeric,
            Error::Shape(_)
            | Error::Contract(_)
            | Error::Data(_)
            | Error::Format { .. }
            | Error::Line { .. }
            | Error::Io(_) => ErrorCategory::Data,
        }
    }
}
