//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("invalid shape: extent must be >= 1, got {0:?}")]
    InvalidShape(Vec<usize>),

    #[error("length mismatch: expected {expected} elements, got {got}")]
    Length { expected: usize, got: usize },

    #[error("backward requires a scalar loss, got {0} elements")]
    NonScalarLoss(usize),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("degenerate statistics: {0}")]
    Degenerate(String),

    #[error("undefined AUC: ground truth contains a single class")]
    SingleClassGroundTruth,

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown config key '{key}'; valid keys: {valid}")]
    UnknownKey { key: String, valid: String },

    #[error("decode error at byte {offset}: {msg}")]
    Decode { offset: usize, msg: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint version mismatch: file has {found}, this build supports {supported}")]
    Version { found: u32, supported: u32 },

    #[error("non-finite {what} in '{name}'")]
    NonFinite { what: String, name: String },

    #[error("training failed at epoch {epoch}, batch {batch}: {msg}")]
    Training { epoch: usize, batch: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
