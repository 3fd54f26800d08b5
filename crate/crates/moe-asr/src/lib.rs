//! Sparsely-gated mixture-of-experts sequence transduction, desk scale.
//!
//! Everything is built from scratch on an `f64` reverse-mode autodiff core:
//! switch routing with expert capacity, the load-balance auxiliary loss,
//! attention blocks with absolute/relative/streaming variants, a seq2seq
//! encoder–decoder and a transducer, plus a training and evaluation harness
//! for synthetic multi-language transcription tasks.
//!
//! Start with the `examples/` directory — each file is a runnable tour of
//! one capability.

pub mod blocks;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod models;
pub mod moe;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::rng::RngStream;
pub use tensor::Tensor;
