//! Question-conditioned scoring and hard top-k selection with relaxed
//! gradients.
//!
//! Candidates are scored against the pooled question, then `k` of them are
//! chosen. The forward value is always an exact copy of the chosen rows.
//! Training draws use Gumbel perturbations of the log-scores and route
//! gradients through the tempered softmax of the same perturbed logits.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::error::{MistError, Result};
use crate::features::VideoFeatures;
use crate::numerics::{argmax, top_k_indices, Graph, LinearMap, ParamStore, Tensor, Var};
use crate::rng::stream;

/// Large finite logit offset that removes a candidate from later draws.
const MASKED: f64 = -1e30;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    #[default]
    GumbelWithReplacement,
    GumbelWithoutReplacement,
    Nonparametric,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorMode {
    pub kind: SelectorKind,
    pub temperature: f64,
}

impl SelectorMode {
    pub fn new(kind: SelectorKind, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(MistError::Selection(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self { kind, temperature })
    }
}

impl Default for SelectorMode {
    fn default() -> Self {
        Self {
            kind: SelectorKind::GumbelWithReplacement,
            temperature: 1.0,
        }
    }
}

/// The noise and choices of one selection site, kept so a forward pass can
/// be replayed with identical hard choices.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenDraw {
    pub gumbel: Vec<Vec<f64>>,
    pub indices: Vec<usize>,
    pub soft: Tensor,
}

/// Where selection randomness comes from.
#[derive(Clone, Debug)]
pub enum Noise {
    /// Deterministic argmax top-k.
    Eval,
    /// Fresh Gumbel noise from a stream derived from `seed` and the site path.
    Fresh { seed: u64 },
    /// As `Fresh`, also logging every draw in visiting order.
    Record { seed: u64, log: Vec<FrozenDraw> },
    /// Reuses logged noise and hard choices. The forward value becomes a
    /// smooth function of the parameters around the logged point, which
    /// makes finite-difference checks meaningful.
    Replay { log: Vec<FrozenDraw>, cursor: usize },
}

/// A selection recorded on a tape.
#[derive(Clone, Debug)]
pub struct Selection {
    pub indices: Vec<usize>,
    /// Score distribution over candidates.
    pub soft_weights: Vec<f64>,
    /// Chosen blocks stacked in draw order.
    pub selected: Var,
    pub straight_through: bool,
}

/// Detached selection output.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    pub indices: Vec<usize>,
    pub soft_weights: Vec<f64>,
    pub selected: Tensor,
    pub straight_through: bool,
}

impl Selection {
    pub fn detach(&self, g: &Graph) -> SelectionResult {
        SelectionResult {
            indices: self.indices.clone(),
            soft_weights: self.soft_weights.clone(),
            selected: g.value(self.selected).clone(),
            straight_through: self.straight_through,
        }
    }
}

/// Query and key projections of one selection site. Keys carry no bias: a
/// key bias shifts every logit equally and has no effect after softmax.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    pub query: LinearMap,
    pub key: LinearMap,
}

impl SelectionParams {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize, proj_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: LinearMap::init(store, &format!("{name}.query"), dim, proj_dim, true, rng),
            key: LinearMap::init(store, &format!("{name}.key"), dim, proj_dim, false, rng),
        }
    }
}

/// Attention logits `g_q(q)·g_k(keys)ᵀ/√d` for a `1 × D` query.
pub fn cross_modal_logits(
    g: &mut Graph,
    store: &ParamStore,
    query: Var,
    keys: Var,
    params: &SelectionParams,
) -> Result<Var> {
    if params.query.out_dim != params.key.out_dim {
        return Err(MistError::Shape {
            op: "cross_modal_scores",
            detail: format!("projection dims {} and {}", params.query.out_dim, params.key.out_dim),
        });
    }
    let q = params.query.apply(g, store, query)?;
    let k = params.key.apply(g, store, keys)?;
    let dots = g.matmul_nt(q, k)?;
    g.scale(dots, 1.0 / (params.key.out_dim as f64).sqrt())
}

/// Cosine similarities between a `1 × D` query and each key row.
pub fn cosine_logits(g: &mut Graph, query: Var, keys: Var) -> Result<Var> {
    let q = g.normalize_rows(query)?;
    let k = g.normalize_rows(keys)?;
    g.matmul_nt(q, k)
}

pub fn cross_modal_scores(
    q_vec: &Tensor,
    keys: &Tensor,
    params: &SelectionParams,
    store: &ParamStore,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let q = g.constant(q_vec.clone().reshape(vec![1, q_vec.numel()])?);
    let k = g.constant(keys.clone());
    let logits = cross_modal_logits(&mut g, store, q, k, params)?;
    let p = g.softmax(logits)?;
    Ok(Tensor::vector(g.value(p).data().to_vec()))
}

pub fn nonparametric_scores(q_vec: &Tensor, keys: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let q = g.constant(q_vec.clone().reshape(vec![1, q_vec.numel()])?);
    let k = g.constant(keys.clone());
    let logits = cosine_logits(&mut g, q, k)?;
    let p = g.softmax(logits)?;
    Ok(Tensor::vector(g.value(p).data().to_vec()))
}

fn sample_gumbel(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let dist = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Chooses `k` of the `n` candidate blocks of `values` (`n·block` rows)
/// given `1 × n` attention logits.
///
/// `site` names the selection site; fresh noise for it comes from a stream
/// derived from the seed and this path, so results do not depend on the
/// order in which other sites are evaluated.
#[allow(clippy::too_many_arguments)]
pub fn select_top_k(
    g: &mut Graph,
    logits: Var,
    values: Var,
    block: usize,
    k: usize,
    mode: SelectorMode,
    noise: &mut Noise,
    site: &[u64],
) -> Result<Selection> {
    let (r, n) = g.shape(logits);
    if r != 1 || n == 0 {
        return Err(MistError::Selection(format!("expected one row of logits, got {r}×{n}")));
    }
    if k == 0 {
        return Err(MistError::Selection("k must be at least 1".into()));
    }
    let with_replacement = mode.kind == SelectorKind::GumbelWithReplacement;
    if !with_replacement && k > n {
        return Err(MistError::Selection(format!(
            "cannot draw {k} of {n} candidates without replacement"
        )));
    }
    let scores = g.softmax(logits)?;
    let soft_weights = g.value(scores).data().to_vec();
    let repeat_scores = |g: &mut Graph| g.gather_rows(scores, &vec![0; k]);

    let deterministic = mode.kind == SelectorKind::Nonparametric || matches!(noise, Noise::Eval);
    if deterministic {
        let indices = if with_replacement {
            vec![argmax(&soft_weights).expect("non-empty"); k]
        } else {
            top_k_indices(&soft_weights, k)
        };
        let soft = repeat_scores(g)?;
        let selected = g.select_blocks(values, soft, &indices, block, None)?;
        return Ok(Selection {
            indices,
            soft_weights,
            selected,
            straight_through: mode.kind == SelectorKind::Nonparametric,
        });
    }

    let logp = g.log_softmax(logits)?;
    let logp_value = g.value(logp).data().to_vec();
    let frozen = match noise {
        Noise::Replay { log, cursor } => {
            let draw = log
                .get(*cursor)
                .cloned()
                .ok_or_else(|| MistError::Selection("replay log exhausted".into()))?;
            *cursor += 1;
            if draw.indices.len() != k || draw.gumbel.iter().any(|row| row.len() != n) {
                return Err(MistError::Selection("replayed draw does not match this site".into()));
            }
            Some(draw)
        }
        _ => None,
    };
    let mut rng = match noise {
        Noise::Fresh { seed } | Noise::Record { seed, .. } => Some(stream(*seed, site)),
        _ => None,
    };

    let mut gumbel = Vec::with_capacity(k);
    let mut indices = Vec::with_capacity(k);
    let mut rows = Vec::with_capacity(k);
    let mut mask = vec![0.0; n];
    for j in 0..k {
        let gj = match (&frozen, rng.as_mut()) {
            (Some(f), _) => f.gumbel[j].clone(),
            (None, Some(rng)) => sample_gumbel(rng, n),
            (None, None) => unreachable!("eval handled above"),
        };
        let offset: Vec<f64> = gj.iter().zip(&mask).map(|(a, b)| a + b).collect();
        let idx = match &frozen {
            Some(f) => f.indices[j],
            None => {
                let perturbed: Vec<f64> = logp_value.iter().zip(&offset).map(|(a, b)| a + b).collect();
                argmax(&perturbed).expect("non-empty")
            }
        };
        let shifted = g.add_const(logp, &Tensor::matrix(1, n, offset)?)?;
        let tempered = g.scale(shifted, 1.0 / mode.temperature)?;
        rows.push(g.softmax(tempered)?);
        if !with_replacement {
            mask[idx] = MASKED;
        }
        gumbel.push(gj);
        indices.push(idx);
    }
    let soft = g.concat_rows(&rows)?;
    let reference = frozen.map(|f| f.soft);
    let selected = g.select_blocks(values, soft, &indices, block, reference)?;
    if let Noise::Record { log, .. } = noise {
        log.push(FrozenDraw {
            gumbel,
            indices: indices.clone(),
            soft: g.value(soft).clone(),
        });
    }
    Ok(Selection {
        indices,
        soft_weights,
        selected,
        straight_through: true,
    })
}

/// Scores for a probability vector, as logits.
fn logits_of(scores: &Tensor) -> Result<Tensor> {
    let p = scores.data();
    let total: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || (total - 1.0).abs() > 1e-6 {
        return Err(MistError::Selection("scores must be a probability vector".into()));
    }
    Tensor::matrix(1, p.len(), p.iter().map(|&v| if v > 0.0 { v.ln() } else { MASKED }).collect())
}

/// Top-k over a fixed score vector. `rng = None` selects deterministically.
pub fn gumbel_topk(
    scores: &Tensor,
    values: &Tensor,
    k: usize,
    mode: SelectorMode,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<SelectionResult> {
    let logits = logits_of(scores)?;
    let n = logits.cols();
    let rows = values.shape().first().copied().unwrap_or(0);
    if rows == 0 || rows % n != 0 {
        return Err(MistError::Selection(format!("{rows} value rows for {n} candidates")));
    }
    let mut noise = match rng {
        Some(r) => Noise::Fresh { seed: r.next_u64() },
        None => Noise::Eval,
    };
    let mut g = Graph::new();
    let l = g.constant(logits);
    let v = g.constant(values.as_matrix());
    let sel = select_top_k(&mut g, l, v, values.as_matrix().rows() / n, k, mode, &mut noise, &[])?;
    Ok(sel.detach(&g))
}

/// Scores of `1 × n` candidates, parametric or cosine.
pub fn site_logits(
    g: &mut Graph,
    store: &ParamStore,
    query: Var,
    keys: Var,
    params: &SelectionParams,
    mode: SelectorMode,
) -> Result<Var> {
    match mode.kind {
        SelectorKind::Nonparametric => cosine_logits(g, query, keys),
        _ => cross_modal_logits(g, store, query, keys, params),
    }
}

/// Selects whole segments. `video` is the flattened `(K·T·N) × D` patch
/// tensor and `segments` the `K × D` segment features; the result stacks
/// `top_k` blocks of `T·N` rows.
#[allow(clippy::too_many_arguments)]
pub fn segment_select_graph(
    g: &mut Graph,
    store: &ParamStore,
    video: Var,
    segments: Var,
    query: Var,
    params: &SelectionParams,
    top_k: usize,
    mode: SelectorMode,
    noise: &mut Noise,
    site: &[u64],
) -> Result<Selection> {
    let (rows, _) = g.shape(video);
    let (k, _) = g.shape(segments);
    if rows % k != 0 {
        return Err(MistError::Shape {
            op: "segment_select",
            detail: format!("{rows} patch rows for {k} segments"),
        });
    }
    let logits = site_logits(g, store, query, segments, params, mode)?;
    select_top_k(g, logits, video, rows / k, top_k, mode, noise, site)
}

/// Selects `top_j` patch rows of one `N × D` frame.
#[allow(clippy::too_many_arguments)]
pub fn region_select_graph(
    g: &mut Graph,
    store: &ParamStore,
    frame_patches: Var,
    query: Var,
    params: &SelectionParams,
    top_j: usize,
    mode: SelectorMode,
    noise: &mut Noise,
    site: &[u64],
) -> Result<Selection> {
    let logits = site_logits(g, store, query, frame_patches, params, mode)?;
    select_top_k(g, logits, frame_patches, 1, top_j, mode, noise, site)
}

fn noise_for(rng: Option<&mut dyn rand::RngCore>) -> Noise {
    match rng {
        Some(r) => Noise::Fresh { seed: r.next_u64() },
        None => Noise::Eval,
    }
}

/// Detached segment selection; `selected` has shape `top_k × T × N × D`.
#[allow(clippy::too_many_arguments)]
pub fn segment_select(
    video: &VideoFeatures,
    segments: &Tensor,
    q_vec: &Tensor,
    params: &SelectionParams,
    store: &ParamStore,
    top_k: usize,
    mode: SelectorMode,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<SelectionResult> {
    let (k, t, n, d) = (video.segments(), video.frames_per_segment(), video.patches(), video.dim());
    if segments.as_matrix().rows() != k || segments.as_matrix().cols() != d {
        return Err(MistError::Shape {
            op: "segment_select",
            detail: format!("segments {:?} for K={k}, D={d}", segments.shape()),
        });
    }
    let mut g = Graph::new();
    let v = g.constant(video.tensor().as_matrix());
    let s = g.constant(segments.as_matrix());
    let q = g.constant(q_vec.clone().reshape(vec![1, q_vec.numel()])?);
    let mut noise = noise_for(rng);
    let sel = segment_select_graph(&mut g, store, v, s, q, params, top_k, mode, &mut noise, &[])?;
    let mut out = sel.detach(&g);
    out.selected = out.selected.reshape(vec![top_k, t, n, d])?;
    Ok(out)
}

/// Detached region selection over one frame; `selected` is `top_j × D`.
pub fn region_select(
    frame_patches: &Tensor,
    q_vec: &Tensor,
    params: &SelectionParams,
    store: &ParamStore,
    top_j: usize,
    mode: SelectorMode,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<SelectionResult> {
    let mut g = Graph::new();
    let p = g.constant(frame_patches.as_matrix());
    let q = g.constant(q_vec.clone().reshape(vec![1, q_vec.numel()])?);
    let mut noise = noise_for(rng);
    let sel = region_select_graph(&mut g, store, p, q, params, top_j, mode, &mut noise, &[])?;
    Ok(sel.detach(&g))
}
