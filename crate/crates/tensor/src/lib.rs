//! Dense real tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] on a scalar node sweeps the tape in reverse and
//! returns [`Gradients`] for every node that depends on a leaf created with
//! `requires_grad`. Values are checked for NaN/Inf after each op.
//!
//! ```
//! use rftensor::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::scalar(3.0)).unwrap();
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

mod backward;
mod catalog;
mod composite;
mod error;
mod gradcheck;
mod graph;
mod kernels;
mod real;
mod tensor;
mod vecmath;

pub use backward::Gradients;
pub use catalog::{check_catalog, OpCheck};
pub use composite::Attention;
pub use error::{Result, TensorError};
pub use gradcheck::{gradcheck, gradient_error, CoordinateCheck, GradcheckConfig, GradcheckReport};
pub use graph::{Graph, Var};
pub use real::Real;
pub use tensor::Tensor;

/// Names of the differentiable primitives provided by [`Graph`].
pub const OP_CATALOG: &[&str] = &[
    "add",
    "sub",
    "mul",
    "affine",
    "matmul",
    "conv1d",
    "layer_norm",
    "softmax",
    "relu",
    "gelu",
    "sigmoid",
    "ln",
    "clamp",
    "mean",
    "sum",
    "concat",
    "gather",
    "permute",
    "reshape",
    "detach",
    "attention",
];
