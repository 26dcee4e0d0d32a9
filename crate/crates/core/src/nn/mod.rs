//! Minimal CPU neural-network toolkit: tensors, a reverse-mode tape,
//! convolutional layers, optimizers and a finite-difference checker.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, NormMode, Var};
pub use layers::{Activation, Block, Conv, ForwardCtx, Norm};
pub use optim::{Adam, Sgd};
pub use params::ParamStore;
pub use tensor::Tensor;

#[cfg(test)]
mod tests_ops;
