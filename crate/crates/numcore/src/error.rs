use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
}

pub type Result<T> = std::result::Result<T, NumError>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(NumError::Contract(msg.into()))
}
