use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error at node {node}: {message}")]
    Shape { node: String, message: String },

    #[error("gradient requested for non-scalar output `{name}` with shape {shape:?}")]
    NonScalarOutput { name: String, shape: Vec<usize> },

    #[error("graph input `{0}` is not bound")]
    Unbound(String),

    #[error("graph has no output named `{0}`")]
    UnknownOutput(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero-norm row {row} in {what}")]
    ZeroNormRow { what: String, row: usize },

    #[error("label role mismatch: expected {expected}, found {found}")]
    LabelRole { expected: String, found: String },

    #[error("loss `{loss}` cannot be trained with label source `{labels}`")]
    IncompatibleLabels { loss: String, labels: String },

    #[error("non-finite training loss at epoch {epoch}, step {step}")]
    NanLoss { epoch: usize, step: usize },

    #[error("non-finite gradient for parameter `{0}`")]
    NanGradient(String),

    #[error("class {class} has {available} samples, {requested} requested")]
    InsufficientSamples {
        class: usize,
        available: usize,
        requested: usize,
    },

    #[error("empty dataset: {0}")]
    Empty(String),

    #[error("bad magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("truncated file {path}: {message}")]
    Truncated { path: PathBuf, message: String },

    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }
}

/// Attaches a pipeline stage name to an error.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
