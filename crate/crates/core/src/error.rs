use thiserror::Error;

pub type Result<T> = std::result::Result<T, ZoError>;

#[derive(Debug, Error)]
pub enum ZoError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("scoring failed: {0}")]
    Scoring(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl ZoError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        ZoError::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        ZoError::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        ZoError::Input(msg.into())
    }
}
