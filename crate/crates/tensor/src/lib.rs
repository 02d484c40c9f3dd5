//! Minimal dense tensor engine with reverse-mode automatic differentiation.
//!
//! Values are row-major `f64` buffers. Differentiable computation is recorded
//! on a [`Tape`]; [`Tape::backward`] walks the recorded nodes in reverse and
//! returns a [`Gradients`] table keyed by [`Var`].

mod adam;
mod error;
mod kernels;
mod tape;
mod tensor;

pub use adam::Adam;
pub use error::{Result, TensorError};
pub use kernels::{bilinear_sample, conv2d};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{broadcast_shape, Tensor};
