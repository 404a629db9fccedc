use std::path::PathBuf;

use clozecheck_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown character {ch:?} at position {pos}")]
    UnknownChar { pos: usize, ch: char },
    #[error("unknown token id {0}")]
    UnknownId(usize),
    #[error("no confusion entry for {0:?}")]
    NoConfusion(char),
    #[error("invalid confusion set: {0}")]
    InvalidConfusion(String),
    #[error("invalid label sequence: {0}")]
    InvalidLabels(String),
    #[error("edit payloads do not match labels: {0}")]
    InconsistentScript(String),
    #[error("cannot render empty text")]
    EmptyText,
    #[error("image width {width} exceeds maximum {max}")]
    TooWide { width: usize, max: usize },
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("target of length {target} needs at least {needed} frames, got {frames}")]
    TargetTooLong {
        target: usize,
        needed: usize,
        frames: usize,
    },
    #[error("answer of length {len} does not fit in {max} text positions")]
    AnswerTooLong { len: usize, max: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),
    #[error("bad manifest line {line} in {path}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("bad image {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
