//! Document-context transformer translation toolkit.
//!
//! A self-contained neural machine translation stack: a reverse-mode
//! autodiff tensor engine, transformer building blocks, a context encoder
//! over preceding source sentences with gated integration into the encoder
//! and decoder, two-step training with parameter freezing, beam-search
//! decoding with incremental caches, and corpus-level BLEU evaluation.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod evaluation;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
