use std::path::PathBuf;

use numcore::NumError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("format error in {name}: {msg}")]
    Format { name: String, msg: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Num(#[from] NumError),
}

impl Error {
    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Format { .. } => "format",
            Error::Data(_) => "data",
            Error::Numeric(_) => "numeric",
            Error::Io { .. } => "io",
            Error::Num(NumError::Config(_)) => "config",
            Error::Num(NumError::Contract(_)) => "contract",
            Error::Num(NumError::NonFinite { .. }) => "numeric",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(name: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            name: name.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
