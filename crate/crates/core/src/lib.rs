//! Sequence-to-sequence Transformer laboratory with a composed layer that
//! mixes every encoder sub-layer output into distinct cross-attention keys
//! and values for each decoder layer.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod cogsynth;
pub mod composer;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
