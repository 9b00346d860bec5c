//! Dense row-major tensors and a tape-recorded reverse-mode graph.
//!
//! [`Tensor`] is a plain value: a shape and a flat buffer. Differentiable
//! computation goes through a [`Graph`], which records every op in the order
//! it was issued and replays the tape backwards exactly once.
//!
//! ```
//! use mce_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::new(vec![2], vec![1.0, -3.0]).unwrap());
//! let y = g.mul(x, x).unwrap();
//! let loss = g.sum(y);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -6.0]);
//! ```

mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use error::TensorError;
pub use graph::{ConvSpec, Gradients, Graph, Var};
pub use tensor::Tensor;

/// Scalar type of every tensor buffer.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
/// Scalar type of every tensor buffer.
#[cfg(feature = "f32")]
pub type Real = f32;

/// Dtype tag written into serialized parameter records.
#[cfg(not(feature = "f32"))]
pub const REAL_DTYPE_TAG: u8 = 1;
#[cfg(feature = "f32")]
pub const REAL_DTYPE_TAG: u8 = 0;

pub type Result<T> = std::result::Result<T, TensorError>;
