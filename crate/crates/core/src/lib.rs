//! Content-aware dynamic feature quantization for small convolutional
//! super-resolution networks.
//!
//! Every quantized convolution owns a set of candidate feature quantizers
//! (one per bit-width) and a light bit selector. For each input patch the
//! selector looks at how "busy" the patch is (mean image gradient) and how
//! spread out the incoming feature is (per-channel standard deviation), and
//! picks the bit-width used to quantize that feature. Training pushes the
//! selector towards low bit-widths with a bit regularizer while pixel and
//! distillation losses hold the reconstruction quality.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, PNG handling and
//! the command line live in the companion `cadyq` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod cost;
pub mod data;
mod error;
pub mod gradcheck;
pub mod heatmap;
pub mod loss;
mod math;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod pipeline;
pub mod quant;
pub mod selector;
pub mod tensor;
pub mod tiling;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
