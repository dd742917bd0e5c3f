//! Dense tensors, a define-by-run reverse-mode graph, MLPs and Adam.

mod adam;
mod graph;
mod mlp;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{sigmoid, softplus, Gradients, Graph, NodeId};
pub use mlp::{Activation, BoundMlp, Linear, Mlp, Module};
pub use tensor::Tensor;

/// Gradients for `nodes`, zero-filled where a node is disconnected.
pub fn collect_grads(grads: &Gradients, nodes: &[NodeId]) -> Vec<Tensor> {
    nodes.iter().map(|&id| grads.wrt(id)).collect()
}
