use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("phantom generation failed: {0}")]
    Generation(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed sidecar {path}: {msg}")]
    Sidecar { path: PathBuf, msg: String },

    #[error("payload size mismatch in {path}: expected {expected} bytes, found {actual}")]
    PayloadSize {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("no valid crop after {attempts} proposals (artery overlap below {min_fraction})")]
    NoValidCrop { attempts: usize, min_fraction: f64 },

    #[error("volume {dims:?} is smaller than the {needed}^3 crop")]
    VolumeTooSmall { dims: [usize; 3], needed: usize },

    #[error("mask ratio {0} outside (0, 1)")]
    MaskRatio(f64),

    #[error("mask plan masks {actual} patches, expected {expected}")]
    MaskCount { expected: usize, actual: usize },

    #[error("model configuration: {0}")]
    Config(String),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("cost matrix contains NaN at ({row}, {col})")]
    NanCost { row: usize, col: usize },

    #[error("no lesions in evaluation set")]
    NoLesions,

    #[error("fpr budget must be non-negative, got {0}")]
    NegativeBudget(f64),

    #[error("paired vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("predictions reference unknown case {0}")]
    UnknownCase(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
