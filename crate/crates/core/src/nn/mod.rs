//! Minimal tensor and reverse-mode autodiff layer used by the detector and
//! the domain discriminators.

mod graph;
mod params;
mod tensor;

pub use graph::{CellRange, Gradients, Graph, ParamKey, Var};
pub use params::{clip_grad_norm, normal_tensor, Adam, ParamSet, Sgd};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
