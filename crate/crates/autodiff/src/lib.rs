//! Minimal deterministic reverse-mode automatic differentiation.
//!
//! Tensors are dense, row-major, `f32`, rank 1 to 4. The operation set is
//! what a small 2-D U-Net with a spatial-transformer head needs: convolution,
//! nearest upsampling, channel concatenation, bilinear warping, a handful of
//! elementwise maps and reductions, plus [`CustomOp`] for fused losses.
//!
//! All reductions run in index order with `f64` accumulators, so a forward
//! pass is bit-reproducible for identical inputs.

mod conv;
mod error;
pub mod gradcheck;
mod optim;
mod sample;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use optim::{Adam, AdamConfig};
pub use tape::{Axis, CustomOp, Tape, Var};
pub use tensor::{Tensor, MAX_RANK};
