//! Dense `f64` tensors with a reverse-mode tape.
//!
//! The tape is rebuilt for every forward pass. Parameters live in a
//! [`ParamStore`] outside the tape; [`Tape::param`] copies their current value
//! in as a leaf, and [`Gradients::accumulate`] folds leaf gradients back into
//! the store for the optimizer.

mod checkpoint;
mod error;
mod gemm;
pub mod gradcheck;
mod optim;
mod param;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use error::{Result, TensorError};
pub use optim::{cosine_anneal, AdamW, AdamWConfig};
pub use param::{Init, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
