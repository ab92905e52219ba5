use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{LayerNormParams, LinearMap, ParamStore};
use crate::error::{MistError, Result};

/// Parameters of one multi-head self-attention block.
///
/// The key projection carries no bias: a key bias shifts every score in a
/// query row by the same amount and cannot change the softmax.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub query: LinearMap,
    pub key: LinearMap,
    pub value: LinearMap,
    pub output: LinearMap,
    pub heads: usize,
    /// Present when the block is wrapped as `LayerNorm(x + MultiHead(x))`.
    pub norm: Option<LayerNormParams>,
}

impl AttentionParams {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        residual_norm: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(MistError::Invalid(format!(
                "attention dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: LinearMap::init(store, &format!("{name}.query"), dim, dim, true, rng),
            key: LinearMap::init(store, &format!("{name}.key"), dim, dim, false, rng),
            value: LinearMap::init(store, &format!("{name}.value"), dim, dim, true, rng),
            output: LinearMap::init(store, &format!("{name}.output"), dim, dim, true, rng),
            heads,
            norm: residual_norm.then(|| LayerNormParams::init(store, &format!("{name}.norm"), dim)),
        })
    }

    pub fn dim(&self) -> usize {
        self.query.out_dim
    }
}

/// Multi-head self-attention over the rows of `tokens` (`n × D`).
///
/// Each head uses `d_k = D / heads` in the `1/sqrt(d_k)` scaling. No
/// positional terms enter here, so the map is permutation-equivariant.
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    tokens: Var,
    params: &AttentionParams,
) -> Result<Var> {
    let (_, dim) = g.shape(tokens);
    let heads = params.heads;
    if heads == 0 || dim % heads != 0 || dim != params.dim() {
        return Err(MistError::Invalid(format!(
            "multi_head_attention: dim {dim} with {heads} heads (block dim {})",
            params.dim()
        )));
    }
    let dk = dim / heads;
    let q = params.query.apply(g, store, tokens)?;
    let k = params.key.apply(g, store, tokens)?;
    let v = params.value.apply(g, store, tokens)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut mixed = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dk, dk)?,
                g.slice_cols(k, h * dk, dk)?,
                g.slice_cols(v, h * dk, dk)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale)?;
        let weights = g.softmax(scores)?;
        mixed.push(g.matmul(weights, vh)?);
    }
    let joined = if heads == 1 { mixed[0] } else { g.concat_cols(&mixed)? };
    let out = params.output.apply(g, store, joined)?;
    match &params.norm {
        Some(norm) => {
            let res = g.add(tokens, out)?;
            norm.apply(g, store, res)
        }
        None => Ok(out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tokens(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::numerics::params::small_normal(n, d, 1.0, &mut rng)
    }

    fn run(store: &ParamStore, params: &AttentionParams, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let out = multi_head_attention(&mut g, store, v, params).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(AttentionParams::init(&mut store, "a", 6, 4, false, &mut rng).is_err());
    }

    #[test]
    fn single_token_is_value_then_output() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = AttentionParams::init(&mut store, "a", 8, 2, false, &mut rng).unwrap();
        let x = tokens(1, 8, 4);
        let out = run(&store, &p, &x);

        let mut g = Graph::new();
        let v = g.constant(x);
        let v = p.value.apply(&mut g, &store, v).unwrap();
        let o = p.output.apply(&mut g, &store, v).unwrap();
        let expect = g.value(o);
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
