//! Minimal reverse-mode autodiff over dense NCHW tensors.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod store;
mod tensor;

pub use graph::{channel_shape, Gradients, Graph, Var};
pub use optim::RmsProp;
pub use store::{ParamId, ParamKind, VarStore};
pub use tensor::{gemm, Real, Tensor};
