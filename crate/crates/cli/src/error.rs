use std::fmt::Display;

/// Error categories; each maps to its own process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Model(_) => 4,
            CliError::Runtime(_) => 5,
        }
    }

    pub fn config(e: impl Display) -> CliError {
        CliError::Config(e.to_string())
    }

    pub fn data(e: impl Display) -> CliError {
        CliError::Data(e.to_string())
    }

    pub fn model(e: impl Display) -> CliError {
        CliError::Model(e.to_string())
    }

    pub fn runtime(e: impl Display) -> CliError {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
