//! Dense `f32`/`f64` tensors with a Wengert-list tape for reverse-mode
//! automatic differentiation.
//!
//! The crate provides exactly the operators needed by convolutional image
//! networks whose weights are produced by another network: 2D convolution
//! (strided, dilated, zero-padded), transposed convolution, instance
//! normalization, an affine map, and a handful of elementwise ops and
//! reductions.
//!
//! Two execution modes share the same numeric kernels:
//!
//! * [`Eager`] evaluates immediately and records nothing.
//! * [`Tape`] records every operation so [`Tape::backward`] can push
//!   gradients back to the leaves.
//!
//! Because both call the same kernels in the same order, a forward pass
//! through either mode yields bit-identical values.

mod element;
mod error;
mod exec;
pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use exec::{Eager, Exec};
pub use kernels::{Conv2dParams, ConvTransposeParams};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
