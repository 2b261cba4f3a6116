//! Command errors and their process exit codes.

use dtnet_core::DtnError;
use dtnet_tensor::TensorError;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error(transparent)]
    Model(#[from] DtnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(vec![msg.into()])
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::Model(e) => match e {
                DtnError::Config(_) => EXIT_CONFIG,
                DtnError::Io(_) | DtnError::Format { .. } => EXIT_IO,
                DtnError::Tensor(TensorError::Io(_) | TensorError::Format { .. }) => EXIT_IO,
                DtnError::Numerical(_) | DtnError::Tensor(_) => EXIT_NUMERICAL,
            },
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
