//! Minimal reverse-mode automatic differentiation, dense layers and Adam.

mod adam;
mod graph;
mod nn;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{Graph, NodeId};
pub use nn::{DenseLayer, Init, Mlp, MlpNodes};
pub use tensor::Tensor;

pub(crate) use graph::sigmoid;
