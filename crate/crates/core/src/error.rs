use std::io;
use std::path::{Path, PathBuf};

/// Errors raised anywhere in the detection pipeline.
#[derive(Debug, thiserror::Error)]
pub enum SedError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("training error: {0}")]
    Training(String),
    /// A pipeline stage was run before the stage that produces its inputs.
    #[error("missing prerequisite artifact {path} (run `{stage}` first)")]
    MissingArtifact { path: PathBuf, stage: &'static str },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
}

impl SedError {
    /// Short machine-readable category, used in the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            SedError::Shape(_) => "shape",
            SedError::Config(_) => "config",
            SedError::Format(_) => "format",
            SedError::Data(_) => "data",
            SedError::Usage(_) => "usage",
            SedError::Training(_) => "training",
            SedError::MissingArtifact { .. } => "missing_artifact",
            SedError::Io { .. } => "io",
            SedError::Json(_) => "json",
            SedError::Wav(_) => "wav",
        }
    }

    pub(crate) fn io(path: impl AsRef<Path>) -> impl FnOnce(io::Error) -> SedError {
        let path = path.as_ref().to_path_buf();
        move |source| SedError::Io { path, source }
    }
}

pub type Result<T, E = SedError> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::SedError::Shape(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::SedError::Config(format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use shape_err;
