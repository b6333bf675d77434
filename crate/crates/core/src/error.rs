use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: output would be empty ({detail})")]
    EmptyOutput { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("batchnorm in train mode needs at least 2 values per channel, got {count}")]
    SingleElementBatch { count: usize },

    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange { label: usize, classes: usize, row: usize },

    #[error("spatial extent underflows at stage `{stage}`: {detail}")]
    SpatialUnderflow { stage: String, detail: String },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("requested {requested} trainable layers but the model has only {available}")]
    TooManyTrainableLayers { requested: usize, available: usize },

    #[error("non-finite gradient in parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("checkpoint does not match the model:\n  {}", .0.join("\n  "))]
    CheckpointMismatch(Vec<String>),

    #[error("{path}:{line}: {detail}")]
    Manifest { path: PathBuf, line: usize, detail: String },

    #[error("run record {path}:{line}: {detail}")]
    Record { path: PathBuf, line: usize, detail: String },

    #[error("unsupported image format in {path}: {detail}")]
    UnsupportedImage { path: PathBuf, detail: String },

    #[error("malformed image {path}: {detail}")]
    MalformedImage { path: PathBuf, detail: String },

    #[error("cannot split into {k} folds: class {class} has only {count} samples")]
    FoldTooSmall { k: usize, class: usize, count: usize },

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
