use thiserror::Error;

/// Unified error type for the whole crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with incompatible tensor shapes or invalid operands.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A layer, model, or run configuration is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid input data (empty prompt, bad volume, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A forward op produced a NaN or infinity.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    /// Parse failure in one of the on-disk formats.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// Training diverged or a sampling precondition could not be met.
    #[error("runtime error: {0}")]
    Runtime(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Error::Runtime(msg.into())
    }

    pub fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
