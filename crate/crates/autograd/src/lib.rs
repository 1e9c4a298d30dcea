//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records one forward pass. Tensors are row-major and the image
//! ops expect a single `[channels, height, width]` sample; batching is done by
//! the caller, one graph per sample. Ops with hand-written adjoints can be
//! plugged in through [`CustomOp`].

pub mod check;
mod graph;
pub mod kernels;
mod tensor;

pub use graph::{CustomOp, Gradients, Graph, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("op error: {0}")]
    Op(String),
}

pub type Result<T> = std::result::Result<T, Error>;
