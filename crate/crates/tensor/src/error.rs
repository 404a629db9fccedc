use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("masked softmax: row {row} has no unmasked entry")]
    AllMaskedRow { row: usize },
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("index {index} out of range for {op} with size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;
