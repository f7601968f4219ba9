use thiserror::Error;

pub type Result<T> = std::result::Result<T, BcrError>;

#[derive(Debug, Error)]
pub enum BcrError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("format error: {0}")]
    Format(String),
}

impl BcrError {
    pub fn config(msg: impl Into<String>) -> Self {
        BcrError::Config(msg.into())
    }

    pub fn schema(msg: impl Into<String>) -> Self {
        BcrError::Schema(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        BcrError::Numeric(msg.into())
    }
}
