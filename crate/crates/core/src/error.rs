use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// An empirical smoothness probe found a pair violating the declared constant.
    #[error("smoothness violation ({what}); witness: {witness}")]
    SmoothnessViolation { what: String, witness: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
