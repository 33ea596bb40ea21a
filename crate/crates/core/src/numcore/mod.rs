//! Dense tensors plus a minimal reverse-mode differentiation engine.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod linalg;
pub mod mem;
pub mod nn;
pub mod tensor;

pub use graph::{Graph, NodeId, ParamId};
pub use nn::{LayerNormParams, Linear, Mlp, ParamStore};
pub use tensor::Tensor;
