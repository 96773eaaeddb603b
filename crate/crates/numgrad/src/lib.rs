//! Dense `f64` tensors, a define-by-run reverse-mode differentiation graph
//! and a central finite-difference gradient checker.
//!
//! ```
//! use std::collections::BTreeMap;
//! use numgrad::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.input("x");
//! let y = g.mul(x, x);
//! let mut params = BTreeMap::new();
//! params.insert("x".to_string(), Tensor::scalar(3.0).with_grad());
//! assert_eq!(g.eval(&params, y).unwrap().item(), Some(9.0));
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads["x"].item(), Some(6.0));
//! ```

mod error;
mod fdcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use error::GradError;
pub use fdcheck::{fd_check, FdReport};
pub use graph::{Axis, Binder, CustomOp, Gradients, Graph, Var};
pub use tensor::Tensor;

/// Named tensors; the usual binding set for [`Graph::eval`].
pub type TensorMap = std::collections::BTreeMap<String, Tensor>;
