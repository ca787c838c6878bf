use thiserror::Error;

/// Errors raised across the library and the command-line front end.
#[derive(Debug, Error)]
pub enum CbusError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("instance generation failed: {0}")]
    Generation(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CbusError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        CbusError::InvalidArgument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        CbusError::InvalidConfig(msg.into())
    }

    /// True when the error stems from user-supplied configuration or input data.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            CbusError::InvalidConfig(_) | CbusError::Json(_) | CbusError::InvalidArgument(_) | CbusError::Generation(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, CbusError>;
