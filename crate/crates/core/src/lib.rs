pub mod alignment;
pub mod augment;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod glyphgen;
pub mod nn;
pub mod ocr;
pub mod persist;
pub mod pipeline;
pub mod synth;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
