//! Dense tensors, a recorded reverse-mode tape, attention, and gradient checking.

pub mod attention;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use attention::{multi_head_attention, AttentionParams};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use params::{LayerNormParams, LinearMap, ParamId, ParamStore};
pub use tensor::{argmax, cross_entropy, mean_pool, softmax, top_k_indices, Tensor};

/// Applies `map` to the rows of `x` outside any tape.
pub fn linear(x: &Tensor, map: &LinearMap, store: &ParamStore) -> crate::Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = map.apply(&mut g, store, v)?;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("non-empty shape") = map.out_dim;
    g.value(y).clone().reshape(shape)
}
