//! Iterative spatial-temporal attention.
//!
//! Each layer pools the question, picks `top_k` segments by attention of the
//! question over segment features, picks `top_j` patches in every frame of
//! those segments, and runs joint self-attention over
//! `[segments; selected patches; words]`. The segment and word outputs feed
//! the next layer; selected patches are chosen afresh in every layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, MistError, Result};
use crate::features::{add_positions_graph, pool_hierarchy_graph, pool_question_graph, PoolMode, QuestionFeatures, VideoFeatures};
use crate::numerics::params::small_normal;
use crate::numerics::{multi_head_attention, AttentionParams, Graph, LinearMap, ParamId, ParamStore, Tensor, Var};
use crate::selection::{segment_select_graph, select_top_k, Noise, Selection, SelectionParams, SelectorKind, SelectorMode};

/// Which parts of the layer are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// No segment selection and no segment tokens; regions are chosen in
    /// every frame of the video.
    NoSegmentSelection,
    /// Every patch of the selected segments becomes a token.
    NoRegionSelection,
    /// Layer output is the plain mean of segment and selected patch
    /// features; no projections, no joint attention, no state update.
    NoJointAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IstaConfig {
    pub segments: usize,
    pub frames_per_segment: usize,
    pub patches: usize,
    pub dim: usize,
    pub words: usize,
    pub top_k: usize,
    pub top_j: usize,
    pub layers: usize,
    pub heads: usize,
    pub selector: SelectorMode,
    pub residual_norm: bool,
    pub pool: PoolMode,
    pub variant: Variant,
}

impl Default for IstaConfig {
    fn default() -> Self {
        Self {
            segments: 8,
            frames_per_segment: 4,
            patches: 16,
            dim: 32,
            words: 8,
            top_k: 2,
            top_j: 12,
            layers: 2,
            heads: 4,
            selector: SelectorMode::default(),
            residual_norm: true,
            pool: PoolMode::Mean,
            variant: Variant::Full,
        }
    }
}

impl IstaConfig {
    pub fn frames(&self) -> usize {
        self.segments * self.frames_per_segment
    }

    /// Self-attention token count per layer.
    pub fn tokens_per_layer(&self) -> usize {
        let (k, t, n, m) = (self.segments, self.frames_per_segment, self.patches, self.words);
        match self.variant {
            Variant::Full => k + self.top_k * t * self.top_j + m,
            Variant::NoSegmentSelection => k * t * self.top_j + m,
            Variant::NoRegionSelection => k + self.top_k * t * n + m,
            Variant::NoJointAttention => k + self.top_k * t * self.top_j,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [self.segments, self.frames_per_segment, self.patches, self.dim, self.words, self.layers];
        if extents.contains(&0) {
            return Err(MistError::Invalid("model extents and layer count must be positive".into()));
        }
        if self.top_k == 0 || self.top_j == 0 {
            return Err(MistError::Invalid("top_k and top_j must be positive".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(MistError::Invalid(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if self.selector.kind != SelectorKind::GumbelWithReplacement {
            if self.top_k > self.segments {
                return Err(MistError::Invalid(format!("top_k {} exceeds {} segments", self.top_k, self.segments)));
            }
            if self.top_j > self.patches {
                return Err(MistError::Invalid(format!("top_j {} exceeds {} patches", self.top_j, self.patches)));
            }
        }
        if self.selector.kind == SelectorKind::Nonparametric && self.layers != 1 {
            return Err(MistError::Invalid("the nonparametric selector runs a single layer".into()));
        }
        Ok(())
    }

    fn check_inputs(&self, video: &VideoFeatures, question: &QuestionFeatures) -> Result<()> {
        let expect = [self.segments, self.frames_per_segment, self.patches, self.dim];
        let got = [video.segments(), video.frames_per_segment(), video.patches(), video.dim()];
        if expect != got {
            return Err(shape_err("mist_forward", format!("video {got:?} for config {expect:?}")));
        }
        if question.words() != self.words || question.w.cols() != self.dim {
            return Err(shape_err(
                "mist_forward",
                format!("question {:?} for {} words of dim {}", question.w.shape(), self.words, self.dim),
            ));
        }
        if video.positions_added() {
            return Err(MistError::PositionsAlreadyAdded);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IstaLayerParams {
    pub segment_selection: SelectionParams,
    pub region_selection: SelectionParams,
    pub segment_proj: LinearMap,
    pub region_proj: LinearMap,
    pub word_proj: LinearMap,
    pub attention: AttentionParams,
}

impl IstaLayerParams {
    pub fn init(store: &mut ParamStore, name: &str, cfg: &IstaConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            segment_selection: SelectionParams::init(store, &format!("{name}.segment_selection"), d, d, rng),
            region_selection: SelectionParams::init(store, &format!("{name}.region_selection"), d, d, rng),
            segment_proj: LinearMap::init(store, &format!("{name}.segment_proj"), d, d, true, rng),
            region_proj: LinearMap::init(store, &format!("{name}.region_proj"), d, d, true, rng),
            word_proj: LinearMap::init(store, &format!("{name}.word_proj"), d, d, true, rng),
            attention: AttentionParams::init(store, &format!("{name}.attention"), d, cfg.heads, cfg.residual_norm, rng)?,
        })
    }
}

/// Ids of the learned temporal (`(K·T + 1) × D`) and token-type (`3 × D`)
/// tables.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIds {
    pub temporal: ParamId,
    pub types: ParamId,
}

impl EmbeddingIds {
    pub fn init(store: &mut ParamStore, frames: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            temporal: store.add("embed.temporal", small_normal(frames + 1, dim, 0.02, rng)),
            types: store.add("embed.types", small_normal(3, dim, 0.02, rng)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MistParams {
    pub embeddings: EmbeddingIds,
    pub layers: Vec<IstaLayerParams>,
}

impl MistParams {
    pub fn init(store: &mut ParamStore, cfg: &IstaConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let embeddings = EmbeddingIds::init(store, cfg.frames(), cfg.dim, rng);
        let layers = (0..cfg.layers)
            .map(|l| IstaLayerParams::init(store, &format!("layer{l}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { embeddings, layers })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalTrace {
    pub weights: Vec<f64>,
    pub selected: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialTrace {
    /// Global frame index `k·T + t`.
    pub frame: usize,
    pub weights: Vec<f64>,
    pub selected: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temporal: Option<TemporalTrace>,
    pub spatial: Vec<SpatialTrace>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub layers: Vec<LayerTrace>,
}

impl AttentionTrace {
    /// Distinct segments selected in any layer, ascending.
    pub fn selected_segments(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self
            .layers
            .iter()
            .filter_map(|l| l.temporal.as_ref())
            .flat_map(|t| t.selected.iter().copied())
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Checks weight normalisation and index bounds.
    pub fn validate(&self, segments: usize, frames: usize, patches: usize) -> Result<()> {
        let check = |w: &[f64], sel: &[usize], n: usize, what: &str| -> Result<()> {
            if w.len() != n || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(MistError::Invalid(format!("{what} weights do not form a distribution over {n}")));
            }
            if sel.iter().any(|&i| i >= n) {
                return Err(MistError::Invalid(format!("{what} index out of range")));
            }
            Ok(())
        };
        for l in &self.layers {
            if let Some(t) = &l.temporal {
                check(&t.weights, &t.selected, segments, "temporal")?;
            }
            for s in &l.spatial {
                if s.frame >= frames {
                    return Err(MistError::Invalid(format!("frame {} out of range", s.frame)));
                }
                check(&s.weights, &s.selected, patches, "spatial")?;
            }
        }
        Ok(())
    }
}

/// Checks a serialized trace against the published layout:
/// `{layers:[{temporal:{weights:[K], selected:[Top_k]}, spatial:[{frame, weights:[N], selected:[Top_j]}]}]}`.
/// Without segment selection `temporal` is absent and `spatial` covers every
/// frame; without region selection `spatial` is empty.
pub fn validate_trace_json(value: &serde_json::Value, cfg: &IstaConfig) -> Result<()> {
    let bad = |msg: &str| MistError::Format(format!("trace: {msg}"));
    let numbers = |v: &serde_json::Value, len: usize, what: &str| -> Result<()> {
        let arr = v.as_array().ok_or_else(|| bad(&format!("{what} is not an array")))?;
        if arr.len() != len || !arr.iter().all(serde_json::Value::is_number) {
            return Err(bad(&format!("{what} must hold {len} numbers")));
        }
        Ok(())
    };
    let indices = |v: &serde_json::Value, len: usize, bound: usize, what: &str| -> Result<()> {
        let arr = v.as_array().ok_or_else(|| bad(&format!("{what} is not an array")))?;
        if arr.len() != len || !arr.iter().all(|x| x.as_u64().is_some_and(|i| (i as usize) < bound)) {
            return Err(bad(&format!("{what} must hold {len} indices below {bound}")));
        }
        Ok(())
    };
    let layers = value
        .get("layers")
        .and_then(|l| l.as_array())
        .ok_or_else(|| bad("missing layers array"))?;
    if layers.len() != cfg.layers {
        return Err(bad(&format!("expected {} layers, found {}", cfg.layers, layers.len())));
    }
    let regions_per_layer = match cfg.variant {
        Variant::Full | Variant::NoJointAttention => cfg.top_k * cfg.frames_per_segment,
        Variant::NoSegmentSelection => cfg.frames(),
        Variant::NoRegionSelection => 0,
    };
    for layer in layers {
        match (layer.get("temporal"), cfg.variant) {
            (Some(_), Variant::NoSegmentSelection) => return Err(bad("unexpected temporal entry")),
            (None, Variant::NoSegmentSelection) => {}
            (None, _) => return Err(bad("missing temporal")),
            (Some(temporal), _) => {
                numbers(&temporal["weights"], cfg.segments, "temporal.weights")?;
                indices(&temporal["selected"], cfg.top_k, cfg.segments, "temporal.selected")?;
            }
        }
        let spatial = layer
            .get("spatial")
            .and_then(|s| s.as_array())
            .ok_or_else(|| bad("missing spatial array"))?;
        if spatial.len() != regions_per_layer {
            return Err(bad(&format!("expected {regions_per_layer} spatial entries")));
        }
        for s in spatial {
            if !s["frame"].as_u64().is_some_and(|f| (f as usize) < cfg.frames()) {
                return Err(bad("spatial.frame must be a frame index"));
            }
            numbers(&s["weights"], cfg.patches, "spatial.weights")?;
            indices(&s["selected"], cfg.top_j, cfg.patches, "spatial.selected")?;
        }
    }
    Ok(())
}

/// Segment and word features carried between layers.
#[derive(Clone, Copy, Debug)]
pub struct IstaState {
    pub segments: Var,
    pub words: Var,
}

pub struct LayerOutput {
    /// Self-attention output tokens.
    pub tokens: Var,
    pub state: IstaState,
    pub trace: LayerTrace,
}

pub struct MistOutput {
    /// `1 × D` pooled representation.
    pub pooled: Var,
    pub layer_tokens: Vec<Var>,
    pub trace: AttentionTrace,
}

struct Regions {
    tokens: Var,
    traces: Vec<SpatialTrace>,
}

/// Chooses `top_j` patches in each frame of `patches` (`frames·N × D`).
/// `frame_ids` gives the global index of each frame for the trace.
#[allow(clippy::too_many_arguments)]
fn select_regions(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &IstaConfig,
    params: &SelectionParams,
    patches: Var,
    frame_ids: &[usize],
    query: Var,
    noise: &mut Noise,
    layer: usize,
) -> Result<Regions> {
    let n = cfg.patches;
    // Projections are applied once for all frames.
    let (qp, kp) = match cfg.selector.kind {
        SelectorKind::Nonparametric => (g.normalize_rows(query)?, g.normalize_rows(patches)?),
        _ => (params.query.apply(g, store, query)?, params.key.apply(g, store, patches)?),
    };
    let scale = match cfg.selector.kind {
        SelectorKind::Nonparametric => 1.0,
        _ => 1.0 / (params.key.out_dim as f64).sqrt(),
    };
    let mut picked = Vec::with_capacity(frame_ids.len());
    let mut traces = Vec::with_capacity(frame_ids.len());
    for (f, &frame) in frame_ids.iter().enumerate() {
        let keys = g.slice_rows(kp, f * n, n)?;
        let values = g.slice_rows(patches, f * n, n)?;
        let dots = g.matmul_nt(qp, keys)?;
        let logits = g.scale(dots, scale)?;
        let sel = select_top_k(g, logits, values, 1, cfg.top_j, cfg.selector, noise, &[layer as u64, 1, frame as u64])?;
        traces.push(SpatialTrace {
            frame,
            weights: sel.soft_weights,
            selected: sel.indices,
        });
        picked.push(sel.selected);
    }
    Ok(Regions {
        tokens: g.concat_rows(&picked)?,
        traces,
    })
}

fn typed(g: &mut Graph, store: &ParamStore, map: &LinearMap, x: Var, types: Var, row: usize) -> Result<Var> {
    let p = map.apply(g, store, x)?;
    let t = g.slice_rows(types, row, 1)?;
    g.add_row(p, t)
}

/// One layer. `video` is the position-tagged `(K·T·N) × D` patch tensor.
#[allow(clippy::too_many_arguments)]
pub fn ista_layer(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &IstaConfig,
    params: &IstaLayerParams,
    types: Var,
    state: IstaState,
    video: Var,
    noise: &mut Noise,
    layer: usize,
) -> Result<LayerOutput> {
    let t = cfg.frames_per_segment;
    let query = pool_question_graph(g, state.words, cfg.pool)?;

    let segment_pick = |g: &mut Graph, noise: &mut Noise| -> Result<Selection> {
        segment_select_graph(
            g,
            store,
            video,
            state.segments,
            query,
            &params.segment_selection,
            cfg.top_k,
            cfg.selector,
            noise,
            &[layer as u64, 0],
        )
    };
    let frames_of = |segments: &[usize]| -> Vec<usize> {
        segments.iter().flat_map(|&s| (0..t).map(move |tt| s * t + tt)).collect()
    };

    let mut trace = LayerTrace::default();
    let (segment_tokens, region_rows) = match cfg.variant {
        Variant::Full | Variant::NoJointAttention => {
            let seg = segment_pick(g, noise)?;
            let frames = frames_of(&seg.indices);
            let regions = select_regions(g, store, cfg, &params.region_selection, seg.selected, &frames, query, noise, layer)?;
            trace.temporal = Some(TemporalTrace {
                weights: seg.soft_weights,
                selected: seg.indices,
            });
            trace.spatial = regions.traces;
            (Some(state.segments), regions.tokens)
        }
        Variant::NoRegionSelection => {
            let seg = segment_pick(g, noise)?;
            trace.temporal = Some(TemporalTrace {
                weights: seg.soft_weights,
                selected: seg.indices,
            });
            (Some(state.segments), seg.selected)
        }
        Variant::NoSegmentSelection => {
            let frames: Vec<usize> = (0..cfg.frames()).collect();
            let regions = select_regions(g, store, cfg, &params.region_selection, video, &frames, query, noise, layer)?;
            trace.spatial = regions.traces;
            (None, regions.tokens)
        }
    };

    let expected = cfg.tokens_per_layer();
    if cfg.variant == Variant::NoJointAttention {
        let seg = segment_tokens.expect("segments present");
        let tokens = g.concat_rows(&[seg, region_rows])?;
        assert_eq!(g.shape(tokens).0, expected, "token count law violated");
        return Ok(LayerOutput { tokens, state, trace });
    }

    let mut parts = Vec::with_capacity(3);
    if let Some(s) = segment_tokens {
        parts.push(typed(g, store, &params.segment_proj, s, types, 0)?);
    }
    parts.push(typed(g, store, &params.region_proj, region_rows, types, 1)?);
    parts.push(typed(g, store, &params.word_proj, state.words, types, 2)?);
    let joint = g.concat_rows(&parts)?;
    let rows = g.shape(joint).0;
    assert_eq!(rows, expected, "token count law violated");

    let tokens = multi_head_attention(g, store, joint, &params.attention)?;
    let words = g.slice_rows(tokens, rows - cfg.words, cfg.words)?;
    let segments = match segment_tokens {
        Some(_) => g.slice_rows(tokens, 0, cfg.segments)?,
        None => state.segments,
    };
    Ok(LayerOutput {
        tokens,
        state: IstaState { segments, words },
        trace,
    })
}

/// Full forward pass to the pooled `1 × D` video-question representation.
pub fn mist_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &IstaConfig,
    params: &MistParams,
    video: &VideoFeatures,
    question: &QuestionFeatures,
    noise: &mut Noise,
) -> Result<MistOutput> {
    cfg.validate()?;
    cfg.check_inputs(video, question)?;
    if params.layers.len() != cfg.layers {
        return Err(MistError::Invalid(format!(
            "{} layer parameter sets for {} layers",
            params.layers.len(),
            cfg.layers
        )));
    }
    let temporal = g.param(store, params.embeddings.temporal);
    let types = g.param(store, params.embeddings.types);
    let raw = g.constant(video.tensor().as_matrix());
    let video = add_positions_graph(g, raw, temporal, cfg.frames(), cfg.patches)?;
    let (_, segments) = pool_hierarchy_graph(g, video, cfg.frames_per_segment, cfg.patches, cfg.pool)?;
    let words = g.constant(question.w.clone());

    let mut state = IstaState { segments, words };
    let mut layer_tokens = Vec::with_capacity(cfg.layers);
    let mut pooled = Vec::with_capacity(cfg.layers);
    let mut trace = AttentionTrace::default();
    for (l, lp) in params.layers.iter().enumerate() {
        let out = ista_layer(g, store, cfg, lp, types, state, video, noise, l)?;
        pooled.push(g.mean_rows(out.tokens)?);
        layer_tokens.push(out.tokens);
        trace.layers.push(out.trace);
        state = out.state;
    }
    let stacked = g.concat_rows(&pooled)?;
    let pooled = g.mean_rows(stacked)?;
    Ok(MistOutput {
        pooled,
        layer_tokens,
        trace,
    })
}

/// Default initial tables for callers that build features outside a tape.
pub fn zero_tables(cfg: &IstaConfig) -> (Tensor, Tensor) {
    (Tensor::zeros(&[cfg.frames() + 1, cfg.dim]), Tensor::zeros(&[3, cfg.dim]))
}
