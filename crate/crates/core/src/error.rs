use dtnet_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DtnError {
    #[error("config error: {0}")]
    Config(String),
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DtnError> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> DtnError {
    DtnError::Config(msg.into())
}
