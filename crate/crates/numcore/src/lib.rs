//! Minimal dense tensor core with tape-based reverse-mode differentiation.
//!
//! Everything trainable in the classifier stack is built from the primitives
//! on [`Graph`]. Gradients are verified against central finite differences by
//! [`grad_check`], which runs in `f64`.
//!
//! The `parallel` feature (on by default) routes large matrix products and
//! gradient-check coordinates through rayon. Both paths produce bitwise
//! identical results.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{NumError, Result};
pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckReport, Stencil};
pub use graph::{softmax_slice, Gradients, Graph, Var, MASK_BIAS};
pub use params::{Param, ParamStore};
pub use rng::RngHandle;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
