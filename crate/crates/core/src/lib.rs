//! Sparse large-kernel depthwise convolution engine.
//!
//! The crate implements decomposed large-kernel depthwise convolutions,
//! dynamic sparse training over them, a small ConvNeXt-style model family
//! built from those pieces, and the analysis tools (parameter/FLOP
//! accounting, effective receptive field maps, latency benchmarks) used to
//! study them.

pub mod act;
pub mod bench;
pub mod checkpoint;
pub mod conv;
pub mod counting;
pub mod erf;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod norm;
pub mod rng;
pub mod sparsity;
pub mod tensor;
pub mod trainer;

pub use error::{Result, SlakError};
pub use tensor::Tensor;
