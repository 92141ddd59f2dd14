use std::path::PathBuf;

use raddiff_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: malformed JSON: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{}: cannot decode image: {source}", path.display())]
    Image { path: PathBuf, source: image::ImageError },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("rotation is not orthonormal with determinant +1: {0}")]
    NotOrthonormal(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{}: bad field file: {reason}", path.display())]
    FieldFormat { path: PathBuf, reason: String },
    #[error("{}: truncated field file: expected {expected} bytes, found {found}", path.display())]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
