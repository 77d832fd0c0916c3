//! Soft context compression for small transformers.
//!
//! A context of `L` tokens is mapped to `ceil(L / r)` continuous vectors,
//! either by mean-pooling full-attention encoder states or by reading the
//! final states of appended compression tokens. Students are trained by
//! distilling a frozen teacher that sees the uncompressed context, over one
//! or several ratios at once.

pub mod autodiff;
pub mod compressor;
pub mod dataset;
pub mod distillation;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod verify;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use params::ParamSet;
pub use tensor::{kl_divergence, softmax, Scalar, Tensor};
