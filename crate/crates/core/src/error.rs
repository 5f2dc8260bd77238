use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PpError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String },
    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("stage {stage} requires {missing} from stage {producer}; run {producer} first")]
    Dependency {
        stage: String,
        producer: String,
        missing: PathBuf,
    },
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Nn(#[from] ppfer_nn::NnError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = PpError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> PpError {
    let path = path.into();
    move |source| PpError::Io { path, source }
}
