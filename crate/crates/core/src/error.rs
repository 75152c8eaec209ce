use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("zero-norm vector in {op} at row {row}")]
    ZeroNorm { op: &'static str, row: usize },

    #[error("backward already ran on this graph; record a new one")]
    BackwardTwice,

    #[error("loss node must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("invalid patch: {0}")]
    Patch(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("checkpoint format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("checkpoint {path}: tensor `{tensor}` out of bounds ({detail})")]
    Bounds {
        path: PathBuf,
        tensor: String,
        detail: String,
    },

    #[error("checkpoint {path}: unsupported format version {found} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
