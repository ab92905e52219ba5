//! Comparison architectures without question-conditioned selection.
//!
//! Every baseline maps a sample to a `1 × D` representation that is scored
//! against the answers exactly like the main model.

use mist_core::features::add_positions_graph;
use mist_core::numerics::params::small_normal;
use mist_core::numerics::{multi_head_attention, AttentionParams, Graph, LinearMap, ParamId, ParamStore, Var};
use mist_core::Result;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Dimensions shared by every baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub frames: usize,
    pub patches: usize,
    pub dim: usize,
    pub words: usize,
    pub heads: usize,
    pub residual_norm: bool,
}

/// Mean of projected frame features and projected words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanpoolParams {
    pub frame_proj: LinearMap,
    pub word_proj: LinearMap,
}

/// One self-attention block over frame (or patch) tokens plus words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub temporal: ParamId,
    pub types: ParamId,
    pub visual_proj: LinearMap,
    pub word_proj: LinearMap,
    pub attention: AttentionParams,
}

/// Temporal attention across frames at each patch position, then spatial
/// attention within each frame. Words join only at the final pooling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DividedParams {
    pub temporal: ParamId,
    pub patch_proj: LinearMap,
    pub word_proj: LinearMap,
    pub temporal_attention: AttentionParams,
    pub spatial_attention: AttentionParams,
}

impl MeanpoolParams {
    pub fn init(store: &mut ParamStore, d: &Dims, rng: &mut impl Rng) -> Self {
        Self {
            frame_proj: LinearMap::init(store, "frame_proj", d.dim, d.dim, true, rng),
            word_proj: LinearMap::init(store, "word_proj", d.dim, d.dim, true, rng),
        }
    }
}

impl DenseParams {
    pub fn init(store: &mut ParamStore, d: &Dims, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            temporal: store.add("embed.temporal", small_normal(d.frames + 1, d.dim, 0.02, rng)),
            types: store.add("embed.types", small_normal(3, d.dim, 0.02, rng)),
            visual_proj: LinearMap::init(store, "visual_proj", d.dim, d.dim, true, rng),
            word_proj: LinearMap::init(store, "word_proj", d.dim, d.dim, true, rng),
            attention: AttentionParams::init(store, "attention", d.dim, d.heads, d.residual_norm, rng)?,
        })
    }
}

impl DividedParams {
    pub fn init(store: &mut ParamStore, d: &Dims, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            temporal: store.add("embed.temporal", small_normal(d.frames + 1, d.dim, 0.02, rng)),
            patch_proj: LinearMap::init(store, "patch_proj", d.dim, d.dim, true, rng),
            word_proj: LinearMap::init(store, "word_proj", d.dim, d.dim, true, rng),
            temporal_attention: AttentionParams::init(store, "temporal_attention", d.dim, d.heads, d.residual_norm, rng)?,
            spatial_attention: AttentionParams::init(store, "spatial_attention", d.dim, d.heads, d.residual_norm, rng)?,
        })
    }
}

fn typed(g: &mut Graph, store: &ParamStore, map: &LinearMap, x: Var, types: Var, row: usize) -> Result<Var> {
    let p = map.apply(g, store, x)?;
    let t = g.slice_rows(types, row, 1)?;
    g.add_row(p, t)
}

/// `video` is the raw `(frames·N) × D` patch matrix, `words` is `M × D`.
pub fn meanpool_forward(g: &mut Graph, store: &ParamStore, p: &MeanpoolParams, d: &Dims, video: Var, words: Var) -> Result<Var> {
    let frames = g.mean_groups(video, d.patches)?;
    let f = p.frame_proj.apply(g, store, frames)?;
    let w = p.word_proj.apply(g, store, words)?;
    let all = g.concat_rows(&[f, w])?;
    g.mean_rows(all)
}

/// Attention over `frames + M` tokens.
pub fn trans_frame_forward(g: &mut Graph, store: &ParamStore, p: &DenseParams, d: &Dims, video: Var, words: Var) -> Result<Var> {
    let temporal = g.param(store, p.temporal);
    let types = g.param(store, p.types);
    let video = add_positions_graph(g, video, temporal, d.frames, d.patches)?;
    let frames = g.mean_groups(video, d.patches)?;
    let f = typed(g, store, &p.visual_proj, frames, types, 0)?;
    let w = typed(g, store, &p.word_proj, words, types, 2)?;
    let tokens = g.concat_rows(&[f, w])?;
    assert_eq!(g.shape(tokens).0, d.frames + d.words, "token count law violated");
    let out = multi_head_attention(g, store, tokens, &p.attention)?;
    g.mean_rows(out)
}

/// Attention over all `frames·N + M` tokens.
pub fn trans_patch_forward(g: &mut Graph, store: &ParamStore, p: &DenseParams, d: &Dims, video: Var, words: Var) -> Result<Var> {
    let temporal = g.param(store, p.temporal);
    let types = g.param(store, p.types);
    let video = add_positions_graph(g, video, temporal, d.frames, d.patches)?;
    let v = typed(g, store, &p.visual_proj, video, types, 1)?;
    let w = typed(g, store, &p.word_proj, words, types, 2)?;
    let tokens = g.concat_rows(&[v, w])?;
    assert_eq!(g.shape(tokens).0, d.frames * d.patches + d.words, "token count law violated");
    let out = multi_head_attention(g, store, tokens, &p.attention)?;
    g.mean_rows(out)
}

/// Divided space-time attention. With a single frame the temporal stage is
/// skipped, leaving plain spatial attention over the patches.
pub fn divided_sta_forward(g: &mut Graph, store: &ParamStore, p: &DividedParams, d: &Dims, video: Var, words: Var) -> Result<Var> {
    let (f, n) = (d.frames, d.patches);
    let temporal = g.param(store, p.temporal);
    let video = add_positions_graph(g, video, temporal, f, n)?;
    let mut x = p.patch_proj.apply(g, store, video)?;
    if f > 1 {
        let by_patch: Vec<usize> = (0..n).flat_map(|pi| (0..f).map(move |fi| fi * n + pi)).collect();
        let regrouped = g.gather_rows(x, &by_patch)?;
        let mut mixed = Vec::with_capacity(n);
        for pi in 0..n {
            let seq = g.slice_rows(regrouped, pi * f, f)?;
            mixed.push(multi_head_attention(g, store, seq, &p.temporal_attention)?);
        }
        let mixed = g.concat_rows(&mixed)?;
        let by_frame: Vec<usize> = (0..f).flat_map(|fi| (0..n).map(move |pi| pi * f + fi)).collect();
        x = g.gather_rows(mixed, &by_frame)?;
    }
    let mut frames = Vec::with_capacity(f);
    for fi in 0..f {
        let seq = g.slice_rows(x, fi * n, n)?;
        frames.push(multi_head_attention(g, store, seq, &p.spatial_attention)?);
    }
    let v = g.concat_rows(&frames)?;
    let w = p.word_proj.apply(g, store, words)?;
    let all = g.concat_rows(&[v, w])?;
    g.mean_rows(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mist_core::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(frames: usize, patches: usize) -> Dims {
        Dims {
            frames,
            patches,
            dim: 8,
            words: 3,
            heads: 2,
            residual_norm: true,
        }
    }

    fn input(rows: usize, d: usize, seed: u64) -> Tensor {
        small_normal(rows, d, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn eye(d: usize) -> Tensor {
        let mut e = Tensor::zeros(&[d, d]);
        for i in 0..d {
            e.data_mut()[i * d + i] = 1.0;
        }
        e
    }

    #[test]
    fn meanpool_of_constant_features_is_constant() {
        let d = dims(4, 3);
        let mut store = ParamStore::new();
        let p = MeanpoolParams::init(&mut store, &d, &mut ChaCha8Rng::seed_from_u64(0));
        *store.get_mut(p.frame_proj.weight) = eye(8);
        *store.get_mut(p.word_proj.weight) = eye(8);
        let c: Vec<f64> = (0..8).map(|i| i as f64 * 0.5 - 1.0).collect();
        let rows = |n: usize| Tensor::from_rows(&vec![c.clone(); n]).unwrap();
        let mut g = Graph::new();
        let v = g.constant(rows(12));
        let w = g.constant(rows(3));
        let out = meanpool_forward(&mut g, &store, &p, &d, v, w).unwrap();
        for (a, b) in g.value(out).data().iter().zip(&c) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_baselines_run_at_declared_sizes() {
        let d = dims(4, 3);
        let mut store = ParamStore::new();
        let p = DenseParams::init(&mut store, &d, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut g = Graph::new();
        let v = g.constant(input(12, 8, 2));
        let w = g.constant(input(3, 8, 3));
        let a = trans_frame_forward(&mut g, &store, &p, &d, v, w).unwrap();
        let b = trans_patch_forward(&mut g, &store, &p, &d, v, w).unwrap();
        assert_eq!(g.shape(a), (1, 8));
        assert_eq!(g.shape(b), (1, 8));
    }

    #[test]
    fn single_frame_divided_equals_dense_patch_attention() {
        let d = dims(1, 5);
        let mut store = ParamStore::new();
        let p = DividedParams::init(&mut store, &d, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let video = input(5, 8, 5);
        let words = input(3, 8, 6);
        let mut g = Graph::new();
        let v = g.constant(video.clone());
        let w = g.constant(words.clone());
        let got = divided_sta_forward(&mut g, &store, &p, &d, v, w).unwrap();

        // Reference: position tag, projection, one attention over all
        // patches, then pooling with the projected words.
        let pos = store.get(p.temporal).row(1).to_vec();
        let mut tagged = video.clone();
        for r in 0..5 {
            tagged.row_mut(r).iter_mut().zip(&pos).for_each(|(x, q)| *x += q);
        }
        let mut h = Graph::new();
        let t = h.constant(tagged);
        let x = p.patch_proj.apply(&mut h, &store, t).unwrap();
        let att = multi_head_attention(&mut h, &store, x, &p.spatial_attention).unwrap();
        let wv = h.constant(words);
        let wp = p.word_proj.apply(&mut h, &store, wv).unwrap();
        let all = h.concat_rows(&[att, wp]).unwrap();
        let want = h.mean_rows(all).unwrap();
        for (a, b) in g.value(got).data().iter().zip(h.value(want).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn divided_temporal_stage_mixes_frames() {
        let d = dims(3, 2);
        let mut store = ParamStore::new();
        let p = DividedParams::init(&mut store, &d, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let video = input(6, 8, 8);
        let run = |video: Tensor| {
            let mut g = Graph::new();
            let v = g.constant(video);
            let w = g.constant(input(3, 8, 9));
            let out = divided_sta_forward(&mut g, &store, &p, &d, v, w).unwrap();
            g.value(out).clone()
        };
        let base = run(video.clone());
        // Changing one patch of frame 2 changes the output through both stages.
        let mut changed = video;
        changed.row_mut(4)[0] += 1.0;
        assert_ne!(base, run(changed));
    }
}
