use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid camera pose: {0}")]
    InvalidPose(String),

    #[error("invalid rotation: quaternion has zero norm")]
    InvalidRotation,

    #[error("scene file has bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported scene file version {0}")]
    UnsupportedVersion(u8),

    #[error("truncated scene payload: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("non-finite value in field {field} of Gaussian {index}")]
    NonFinite { index: usize, field: &'static str },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("gaussian set carries no provenance")]
    MissingProvenance,

    #[error("scene has {have} views, need at least {need}")]
    TooFewViews { have: usize, need: usize },

    #[error("empty partition: {0}")]
    EmptyPartition(&'static str),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("missing poses: {placeholders} placeholder views but {poses} poses supplied")]
    MissingPoses { placeholders: usize, poses: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {message}")]
    Scene { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
