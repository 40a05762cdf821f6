use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor dimension did not have the size an operator requires.
    #[error("{op}: {dim} mismatch (expected {expected}, found {found})")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{op}: expected rank {expected}, found dims {found:?}")]
    Rank {
        op: &'static str,
        expected: &'static str,
        found: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar output, found dims {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("{0}: non-finite value encountered")]
    NonFinite(&'static str),

    #[error("unknown parameter `{0}`")]
    MissingParam(String),

    #[error("layer `{0}` has no 1D counterpart")]
    NoPointCounterpart(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
