//! A small single-sample convolutional engine with reverse-mode gradients.

mod graph;
pub mod ops;
mod tensor;

pub use graph::{Gradients, LayerParams, LayerSpec, Network, NetworkSpec, Operator, Trace};
pub use tensor::Tensor;
