//! Minimal dense tensor algebra with reverse-mode automatic differentiation.
//!
//! Values live in [`Tensor`] (row-major `f64`). Differentiable computations are
//! recorded on a [`Graph`] tape and differentiated with [`Graph::backward`].
//! The [`nn`] module adds parameter storage, a few layers and an Adam optimizer.

mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::finite_diff_check;
pub use graph::{Graph, Var};
pub use nn::{Bound, ParamStore};
pub use kernels::{layer_norm, linear_attention, matmul, softmax, LAYER_NORM_EPS};
pub use tensor::Tensor;
