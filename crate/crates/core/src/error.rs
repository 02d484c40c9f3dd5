use dh_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("scene: {0}")]
    Scene(String),
    #[error("config: {0}")]
    Config(String),
    #[error("attack: {0}")]
    Attack(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
