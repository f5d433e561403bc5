//! Dense tensors, reverse-mode autodiff, Adam, and a finite-difference
//! gradient oracle.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{
    cosine_sim, GradFault, Gradients, Graph, NodeId, OpKind, ParamId, ParamStore, COSINE_EPS,
};
pub use tensor::{softmax_rows, Tensor};

pub(crate) use graph::{gelu, LAYER_NORM_EPS};
pub(crate) use tensor::softmax_in_place;

#[cfg(test)]
mod tests;
