use thiserror::Error;

/// Errors produced by the SB-MoE toolkit.
///
/// The variants map onto the CLI exit codes: shape and numeric failures are
/// numeric (3), format/parse/data failures are data errors (2), config errors
/// are usage errors (1).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate variance: all paired differences are identical")]
    DegenerateVariance,

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
