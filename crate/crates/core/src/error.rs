use std::path::PathBuf;

use rmd_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: parse error at byte {offset}: {message}")]
    Parse {
        file: PathBuf,
        offset: u64,
        message: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("sequence {id}: motion file {path} not found")]
    MissingMotion { id: String, path: PathBuf },
    #[error("no fixture embedding for caption {0:?}")]
    UnknownCaption(String),
    #[error("embedding service failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("embedding caption {caption:?} failed: {source}")]
    Provider {
        caption: String,
        #[source]
        source: Box<Error>,
    },
    #[error("retrieval index is empty")]
    EmptyIndex,
    #[error("format error: {0}")]
    Format(String),
    #[error("index was built with provider {found}, expected {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
