//! Dense tensors, reverse-mode differentiation and optimization.

mod graph;
mod optim;
mod params;
mod scalar;
mod tensor;

pub mod gradcheck;
pub mod layers;

pub use graph::{ConvGeom, Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig, OptimState};
pub use params::{Init, Param, ParameterStore};
pub use scalar::{gemm, Scalar, View};
pub use tensor::Tensor;
