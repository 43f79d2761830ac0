//! Dense tensors, reverse-mode differentiation, transformer layers, Adam and
//! checkpoint I/O.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Graph, Var};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
