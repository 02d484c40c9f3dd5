use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;
