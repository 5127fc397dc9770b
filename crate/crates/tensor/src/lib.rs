//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records each operation with its output value; [`Graph::backward`]
//! walks the tape in reverse and returns [`Gradients`] for every trainable leaf.
//!
//! ```
//! use volflow_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::from_f64_slice(&[2], &[1.0, 2.0]).unwrap());
//! let y = g.mul(x, x).unwrap();
//! let loss = g.sum(y).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod backward;
mod error;
mod gradcheck;
mod graph;
mod scalar;
pub mod shape;
mod tensor;

pub use backward::Gradients;
pub use error::{Result, TensorError};
pub use gradcheck::{analytic_gradient, grad_check, grad_check_coords, relative_error, GradCheck, ScalarFunction};
pub use graph::{BinaryOp, Graph, UnaryOp, Var};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
