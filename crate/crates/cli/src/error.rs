use std::fmt::Display;

use thiserror::Error;

/// Config errors exit with status 2, everything else with 3.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl LabError {
    /// Error attributed to one config field, e.g. `train.peak_lr`.
    pub fn field(field: &str, message: impl Display) -> Self {
        LabError::Config(format!("{field}: {message}"))
    }

    pub fn runtime(message: impl Display) -> Self {
        LabError::Runtime(message.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            LabError::Runtime(_) => 3,
        }
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
