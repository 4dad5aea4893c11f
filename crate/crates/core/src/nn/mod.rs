//! Minimal reverse-mode autodiff for 2D segmentation networks.
//!
//! Tensors are dense `f32` arrays in `N × C × H × W` layout. A [`Tape`]
//! records each operation with enough state to run its backward kernel, and
//! [`Tape::backward`] returns gradients for every parameter of the
//! [`ParamStore`] the tape was built against. Everything runs on one thread
//! in a fixed order, so identical inputs give bit-identical gradients.

mod kernels;
mod params;
mod tape;
mod tensor;

pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
