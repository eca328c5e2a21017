use std::io;

/// Errors raised by the quantization, injection, training and evaluation code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid quantization scheme: {0}")]
    InvalidScheme(String),

    #[error("weight group {group} is empty")]
    EmptyGroup { group: usize },

    #[error("weight group {group} contains a non-finite value at index {index}")]
    NonFiniteWeight { group: usize, index: usize },

    #[error("invalid weight groups: {0}")]
    InvalidGroups(String),

    #[error("{what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("training diverged at step {step} (loss = {loss})")]
    Divergence { step: u64, loss: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
