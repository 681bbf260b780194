use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at key `{key}`: {msg}")]
    Parse { key: String, msg: String },

    #[error("internal consistency: {0}")]
    Consistency(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config mismatch: {0}")]
    Mismatch(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable class name, stable across releases.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Parse { .. } => "parse",
            Error::Consistency(_) => "consistency",
            Error::Capacity(_) => "capacity",
            Error::NonFinite(_) => "non-finite",
            Error::Mismatch(_) => "mismatch",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn parse(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse {
            key: key.into(),
            msg: msg.into(),
        }
    }
}

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(format!($($arg)*))
    };
}
pub(crate) use invalid;
