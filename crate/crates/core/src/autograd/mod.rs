//! Minimal reverse-mode automatic differentiation over dense arrays.
//!
//! Design notes:
//! - Two precisions: `f32` is the training default, `f64` is mandatory for
//!   gradient-check runs (finite differences are unreliable at 32-bit).
//! - All reductions use sequential left-to-right summation with a fixed
//!   iteration order, so runs are bit-reproducible for a fixed seed.
//! - No broadcasting beyond bias-add and row-wise affine; every other shape
//!   mismatch is an error.

mod array;
mod conv;
mod gradcheck;
mod tape;

pub use array::{NdArray, Scalar};
pub use conv::{conv3d_out_extent, conv_transpose3d_out_extent};
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Tape, Var};
