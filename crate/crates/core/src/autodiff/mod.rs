//! Dense tensors with tape-based reverse-mode differentiation, an Adam
//! optimizer and the `UNW1` checkpoint format.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
