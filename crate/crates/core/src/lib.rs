//! Residual-network compression core.
//!
//! Dense tensors with reverse-mode gradients, a residual classifier builder,
//! Adam/cross-entropy training, L1 magnitude pruning, affine 8-bit
//! post-training quantization and classification metrics. The crate is
//! `no_std` + `alloc`; the `std` feature only enables runtime SIMD dispatch
//! in the matrix kernels.

#![cfg_attr(not(feature = "std"), no_std)]

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

extern crate alloc;

pub mod autograd;
pub mod error;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod prune;
pub mod quant;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Scalar, Tensor};
