//! Token-sensitivity-weighted post-training quantization for small
//! transformer-style blocks.
//!
//! The pipeline attributes the quantization-induced output gap of a block to
//! its input tokens with quantization-aware integrated gradients
//! ([`attribution`]), turns the scores into robust token weights
//! ([`weighting`]), and uses the weights in channel-wise equalization
//! ([`equalization`]) or Hessian-based weight quantization ([`gptq`]).

#![allow(clippy::needless_range_loop)]

pub mod attribution;
pub mod cli;
pub mod equalization;
pub mod error;
pub mod gptq;
pub mod quantizers;
pub mod synth;
pub mod tensor;
pub mod toyblock;
pub mod weighting;

pub use error::{Error, Result};
pub use quantizers::{Granularity, QuantConfig, QuantMode, QuantizedTensor};
pub use tensor::Matrix;
pub use toyblock::{BlockKind, BlockModel, QuantizedBlock, QuantizedExecution};
