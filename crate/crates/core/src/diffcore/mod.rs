//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records each primitive as it is evaluated; [`Graph::backward`]
//! walks the record in reverse applying the exact transpose/derivative of
//! each primitive. Only the primitives the segmentation model needs are
//! provided: convolution, leaky ReLU, sigmoid, bilinear upsampling,
//! matrix-vector products, a few reductions, and [`CustomOp`] for losses
//! that carry their own backward rule.

mod gradcheck;
mod graph;
pub mod io;
pub mod kernels;
mod tensor;

pub use gradcheck::{check_flat, gradcheck, relative_error};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use tensor::Tensor;
