//! Dense `f64` tensors and a reverse-mode differentiation tape.
//!
//! Values are row-major and contiguous. Operations are recorded on a
//! [`Graph`] and differentiated with [`Graph::backward`].

mod error;
mod graph;
mod tensor;

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;

pub use error::{Result, TensorError};
pub use graph::{ChannelStats, Gradients, Graph, NormStats, Var, CLAMP_MIN};
pub use tensor::Tensor;
