//! Hierarchical video, question, and answer features.
//!
//! A video is a `K × T × N × D` tensor: `K` segments of `T` frames, each
//! frame split into `N` patches of dimension `D`. Frames and segments are
//! obtained by pooling patches, and a learned temporal table tags every
//! patch with its global frame index.

mod io;
mod synth;

pub use io::{load_features, read_features, save_features, write_features, FeatureHeader, MAGIC};
pub use synth::{generate_synthetic, oracle_label, Planted, Relation, SynthConfig, SynthSample, TaskKind};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, MistError, Result};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoFeatures {
    x: Tensor,
    pub has_cls_patch: bool,
    pub has_cls_frame: bool,
    positions_added: bool,
}

impl VideoFeatures {
    pub fn new(x: Tensor, has_cls_patch: bool, has_cls_frame: bool) -> Result<Self> {
        if x.shape().len() != 4 {
            return Err(shape_err("VideoFeatures", format!("expected K×T×N×D, got {:?}", x.shape())));
        }
        x.ensure_finite("VideoFeatures")?;
        Ok(Self {
            x,
            has_cls_patch,
            has_cls_frame,
            positions_added: false,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.x
    }

    pub fn segments(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn frames_per_segment(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn patches(&self) -> usize {
        self.x.shape()[2]
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[3]
    }

    pub fn positions_added(&self) -> bool {
        self.positions_added
    }

    /// Row index of patch `(k, t, n)` in the flattened `(K·T·N) × D` layout.
    pub fn row_of(&self, k: usize, t: usize, n: usize) -> usize {
        (k * self.frames_per_segment() + t) * self.patches() + n
    }

    pub fn patch(&self, k: usize, t: usize, n: usize) -> &[f64] {
        self.x.row(self.row_of(k, t, n))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionFeatures {
    /// `M × D`; row 0 is the question's [CLS] token.
    pub w: Tensor,
}

impl QuestionFeatures {
    pub fn new(w: Tensor) -> Result<Self> {
        if w.shape().len() != 2 {
            return Err(shape_err("QuestionFeatures", "expected M×D"));
        }
        w.ensure_finite("QuestionFeatures")?;
        Ok(Self { w })
    }

    pub fn words(&self) -> usize {
        self.w.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerBank {
    /// `A × D` candidate answer features.
    pub a: Tensor,
    pub labels: Vec<String>,
}

impl AnswerBank {
    pub fn new(a: Tensor, labels: Vec<String>) -> Result<Self> {
        if a.shape().len() != 2 || a.rows() < 2 {
            return Err(shape_err("AnswerBank", "expected A×D with A ≥ 2"));
        }
        if labels.len() != a.rows() {
            return Err(shape_err("AnswerBank", "one label per answer row"));
        }
        a.ensure_finite("AnswerBank")?;
        Ok(Self { a, labels })
    }

    /// Bank with labels `"0".."A-1"`.
    pub fn indexed(a: Tensor) -> Result<Self> {
        let labels = (0..a.rows()).map(|i| i.to_string()).collect();
        Self::new(a, labels)
    }

    pub fn len(&self) -> usize {
        self.a.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.a.rows() == 0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    #[default]
    Mean,
    FirstToken,
}

/// Frame features (`K × T × D`) and segment features (`K × D`).
pub fn pool_hierarchy(v: &VideoFeatures, mode: PoolMode) -> Result<(Tensor, Tensor)> {
    let (k, t, n, d) = (v.segments(), v.frames_per_segment(), v.patches(), v.dim());
    if mode == PoolMode::FirstToken && !v.has_cls_patch {
        return Err(MistError::Invalid(
            "first-token pooling needs a [CLS] patch slot".into(),
        ));
    }
    let mut frames = vec![0.0; k * t * d];
    for kk in 0..k {
        for tt in 0..t {
            let out = &mut frames[(kk * t + tt) * d..(kk * t + tt + 1) * d];
            match mode {
                PoolMode::Mean => {
                    for nn in 0..n {
                        for (o, x) in out.iter_mut().zip(v.patch(kk, tt, nn)) {
                            *o += x;
                        }
                    }
                    out.iter_mut().for_each(|o| *o /= n as f64);
                }
                PoolMode::FirstToken => out.copy_from_slice(v.patch(kk, tt, 0)),
            }
        }
    }
    let frames = Tensor::new(vec![k, t, d], frames)?;
    let segments = crate::numerics::mean_pool(&frames, 1)?;
    Ok((frames, segments))
}

pub fn pool_question(q: &QuestionFeatures, mode: PoolMode) -> Result<Tensor> {
    match mode {
        PoolMode::Mean => crate::numerics::mean_pool(&q.w, 0),
        PoolMode::FirstToken => Ok(Tensor::vector(q.w.row(0).to_vec())),
    }
}

/// Learned temporal and token-type embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionTable {
    /// `(K·T + 1) × D`; frame `(k, t)` uses row `k·T + t + 1`.
    pub temporal: Tensor,
    /// `3 × D`; rows for segment, region, and word tokens.
    pub types: Tensor,
}

/// Temporal table row for frame `t` of segment `k`.
pub fn frame_position_row(k: usize, t: usize, frames_per_segment: usize) -> usize {
    k * frames_per_segment + t + 1
}

/// Adds `φ_t(k·T + t + 1)` to every patch of frame `(k, t)`. Fails if the
/// features already carry position embeddings.
pub fn add_positions(v: &VideoFeatures, table: &PositionTable) -> Result<VideoFeatures> {
    if v.positions_added {
        return Err(MistError::PositionsAlreadyAdded);
    }
    let (k, t, n, d) = (v.segments(), v.frames_per_segment(), v.patches(), v.dim());
    if table.temporal.rows() != k * t + 1 || table.temporal.cols() != d {
        return Err(shape_err(
            "add_positions",
            format!("temporal table {:?} for K·T+1 = {} rows of dim {d}", table.temporal.shape(), k * t + 1),
        ));
    }
    let mut out = v.clone();
    for kk in 0..k {
        for tt in 0..t {
            let pos = table.temporal.row(frame_position_row(kk, tt, t)).to_vec();
            for nn in 0..n {
                let r = v.row_of(kk, tt, nn);
                for (o, p) in out.x.row_mut(r).iter_mut().zip(&pos) {
                    *o += p;
                }
            }
        }
    }
    out.positions_added = true;
    Ok(out)
}

/// Tape version of [`add_positions`] on the flattened `(K·T·N) × D` video.
pub fn add_positions_graph(
    g: &mut Graph,
    video: Var,
    temporal: Var,
    frames: usize,
    patches: usize,
) -> Result<Var> {
    let index: Vec<usize> = (0..frames)
        .flat_map(|f| std::iter::repeat_n(f + 1, patches))
        .collect();
    let pos = g.gather_rows(temporal, &index)?;
    g.add(video, pos)
}

/// Tape version of mean pooling: patches → frames → segments.
pub fn pool_hierarchy_graph(
    g: &mut Graph,
    video: Var,
    frames_per_segment: usize,
    patches: usize,
    mode: PoolMode,
) -> Result<(Var, Var)> {
    let frames = match mode {
        PoolMode::Mean => g.mean_groups(video, patches)?,
        PoolMode::FirstToken => {
            let (rows, _) = g.shape(video);
            let index: Vec<usize> = (0..rows / patches).map(|f| f * patches).collect();
            g.gather_rows(video, &index)?
        }
    };
    let segments = g.mean_groups(frames, frames_per_segment)?;
    Ok((frames, segments))
}

pub fn pool_question_graph(g: &mut Graph, words: Var, mode: PoolMode) -> Result<Var> {
    match mode {
        PoolMode::Mean => g.mean_rows(words),
        PoolMode::FirstToken => g.slice_rows(words, 0, 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(k: usize, t: usize, n: usize, d: usize, f: impl Fn(usize) -> f64) -> VideoFeatures {
        let x = Tensor::new(vec![k, t, n, d], (0..k * t * n * d).map(f).collect()).unwrap();
        VideoFeatures::new(x, false, false).unwrap()
    }

    #[test]
    fn constant_video_pools_to_constant() {
        let v = video(2, 3, 4, 5, |_| 1.5);
        let (f, s) = pool_hierarchy(&v, PoolMode::Mean).unwrap();
        assert_eq!(f.shape(), &[2, 3, 5]);
        assert_eq!(s.shape(), &[2, 5]);
        assert!(f.data().iter().chain(s.data()).all(|&x| x == 1.5));
    }

    #[test]
    fn small_arithmetic_example() {
        let vals = [1.0, 3.0, 5.0, 7.0];
        let v = video(1, 2, 2, 1, |i| vals[i]);
        let (f, s) = pool_hierarchy(&v, PoolMode::Mean).unwrap();
        assert_eq!(f.data(), &[2.0, 6.0]);
        assert_eq!(s.data(), &[4.0]);
    }

    #[test]
    fn random_video_matches_loop_oracle() {
        let (k, t, n, d) = (2, 3, 4, 3);
        let v = video(k, t, n, d, |i| ((i * 7919) % 101) as f64 / 17.0 - 2.0);
        let (f, s) = pool_hierarchy(&v, PoolMode::Mean).unwrap();
        for kk in 0..k {
            let mut seg = vec![0.0; d];
            for tt in 0..t {
                for dd in 0..d {
                    let mut acc = 0.0;
                    for nn in 0..n {
                        acc += v.patch(kk, tt, nn)[dd];
                    }
                    let frame = acc / n as f64;
                    assert!((f.data()[(kk * t + tt) * d + dd] - frame).abs() < 1e-12);
                    seg[dd] += frame / t as f64;
                }
            }
            for dd in 0..d {
                assert!((s.data()[kk * d + dd] - seg[dd]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn first_token_requires_cls_slot() {
        let v = video(1, 2, 2, 1, |i| i as f64);
        assert!(pool_hierarchy(&v, PoolMode::FirstToken).is_err());
        let x = v.tensor().clone();
        let v = VideoFeatures::new(x, true, false).unwrap();
        let (f, s) = pool_hierarchy(&v, PoolMode::FirstToken).unwrap();
        assert_eq!(f.data(), &[0.0, 2.0]);
        assert_eq!(s.data(), &[1.0]);
    }

    #[test]
    fn question_pooling() {
        let single = QuestionFeatures::new(Tensor::matrix(1, 2, vec![0.3, -0.4]).unwrap()).unwrap();
        assert_eq!(pool_question(&single, PoolMode::Mean).unwrap().data(), &[0.3, -0.4]);
        assert_eq!(pool_question(&single, PoolMode::FirstToken).unwrap().data(), &[0.3, -0.4]);
        let two = QuestionFeatures::new(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        assert_eq!(pool_question(&two, PoolMode::Mean).unwrap().data(), &[0.5, 0.5]);
        let six = QuestionFeatures::new(
            Tensor::matrix(6, 3, (0..18).map(|i| (i as f64).sin()).collect()).unwrap(),
        )
        .unwrap();
        assert_eq!(pool_question(&six, PoolMode::FirstToken).unwrap().data(), six.w.row(0));
    }

    fn table(k: usize, t: usize, d: usize, f: impl Fn(usize) -> f64) -> PositionTable {
        PositionTable {
            temporal: Tensor::matrix(k * t + 1, d, (0..(k * t + 1) * d).map(f).collect()).unwrap(),
            types: Tensor::zeros(&[3, d]),
        }
    }

    #[test]
    fn zero_table_is_identity() {
        let v = video(2, 2, 3, 2, |i| i as f64 * 0.1);
        let out = add_positions(&v, &table(2, 2, 2, |_| 0.0)).unwrap();
        assert_eq!(out.tensor(), v.tensor());
        assert!(out.positions_added());
    }

    #[test]
    fn zero_video_takes_table_rows() {
        let (k, t, n, d) = (2, 3, 2, 2);
        let v = video(k, t, n, d, |_| 0.0);
        let tab = table(k, t, d, |i| i as f64 + 1.0);
        let out = add_positions(&v, &tab).unwrap();
        for kk in 0..k {
            for tt in 0..t {
                for nn in 0..n {
                    assert_eq!(out.patch(kk, tt, nn), tab.temporal.row(kk * t + tt + 1));
                }
            }
        }
    }

    #[test]
    fn equal_frames_become_distinguishable() {
        let v = video(1, 2, 1, 2, |i| [0.5, -0.5][i % 2]);
        let tab = table(1, 2, 2, |i| (i as f64).cos());
        let out = add_positions(&v, &tab).unwrap();
        for dd in 0..2 {
            let diff = out.patch(0, 1, 0)[dd] - out.patch(0, 0, 0)[dd];
            let expect = tab.temporal.row(2)[dd] - tab.temporal.row(1)[dd];
            assert!((diff - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn double_application_is_rejected() {
        let v = video(1, 1, 1, 1, |_| 0.0);
        let tab = table(1, 1, 1, |_| 1.0);
        let once = add_positions(&v, &tab).unwrap();
        assert!(matches!(add_positions(&once, &tab), Err(MistError::PositionsAlreadyAdded)));
    }

    #[test]
    fn wrong_table_size_is_rejected() {
        let v = video(2, 2, 1, 1, |_| 0.0);
        assert!(add_positions(&v, &table(2, 1, 1, |_| 0.0)).is_err());
    }

    #[test]
    fn graph_pooling_matches_tensor_pooling() {
        let (k, t, n, d) = (2, 2, 3, 2);
        let v = video(k, t, n, d, |i| (i as f64 * 0.3).sin());
        let tab = table(k, t, d, |i| (i as f64 * 0.11).cos());
        let eager = add_positions(&v, &tab).unwrap();
        let (ef, es) = pool_hierarchy(&eager, PoolMode::Mean).unwrap();

        let mut g = Graph::new();
        let x = g.constant(v.tensor().clone());
        let temporal = g.constant(tab.temporal.clone());
        let x = add_positions_graph(&mut g, x, temporal, k * t, n).unwrap();
        assert_eq!(g.value(x).data(), eager.tensor().data());
        let (gf, gs) = pool_hierarchy_graph(&mut g, x, t, n, PoolMode::Mean).unwrap();
        for (a, b) in g.value(gf).data().iter().zip(ef.data()) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in g.value(gs).data().iter().zip(es.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
