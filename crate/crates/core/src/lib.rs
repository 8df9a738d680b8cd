//! Headless language-model lab.
//!
//! A small CPU tensor engine with reverse-mode autodiff, a byte-level BPE
//! tokenizer, a pre-LN transformer, the weight-tied cross-entropy and
//! contrastive weight tying objectives, AdamW training with checkpoints,
//! and evaluation/benchmark probes.

pub mod bench;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{HlmError, Result};
