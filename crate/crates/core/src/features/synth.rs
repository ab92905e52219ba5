//! Synthetic planted-event tasks.
//!
//! Class prototypes are signed coordinate axes, so they are exactly
//! orthonormal and exactly representable in `f32`. One further axis is the
//! event cue. An event segment carries the cue (scaled by `cue_strength`)
//! on every patch except the event patch, which holds the class prototype
//! exactly. Every other entry is Gaussian noise. All values are rounded to
//! `f32` so that the feature file round-trips bit for bit.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AnswerBank, QuestionFeatures, VideoFeatures};
use crate::error::{MistError, Result};
use crate::numerics::Tensor;
use crate::rng::stream;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// One event; the answer is its class.
    #[default]
    SingleEvent,
    /// Two events in distinct segments; the question names the class of the
    /// earlier one and the answer is the class of the event after it.
    MultiEventOrder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    None,
    After,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub segments: usize,
    pub frames_per_segment: usize,
    pub patches: usize,
    pub dim: usize,
    pub words: usize,
    pub answers: usize,
    pub task: TaskKind,
    pub noise_std: f64,
    pub cue_strength: f64,
    /// Fixes the prototype and cue axes for a whole task.
    pub prototype_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            segments: 8,
            frames_per_segment: 4,
            patches: 16,
            dim: 32,
            words: 8,
            answers: 4,
            task: TaskKind::SingleEvent,
            noise_std: 0.1,
            cue_strength: 0.25,
            prototype_seed: 0,
        }
    }
}

impl SynthConfig {
    /// Smallest configuration used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            segments: 2,
            frames_per_segment: 2,
            patches: 4,
            dim: 8,
            words: 3,
            answers: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.segments, self.frames_per_segment, self.patches, self.dim, self.words];
        if dims.contains(&0) {
            return Err(MistError::Invalid("synthetic task extents must be positive".into()));
        }
        if self.answers < 2 {
            return Err(MistError::Invalid("need at least 2 answers".into()));
        }
        if self.answers >= self.dim {
            return Err(MistError::Invalid(format!(
                "{} orthogonal prototypes plus a cue axis need dim > {}, got {}",
                self.answers, self.answers, self.dim
            )));
        }
        if self.task == TaskKind::MultiEventOrder && self.segments < 2 {
            return Err(MistError::Invalid("multi-event task needs at least 2 segments".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) || !self.cue_strength.is_finite() {
            return Err(MistError::Invalid("noise_std and cue_strength must be finite, noise_std ≥ 0".into()));
        }
        Ok(())
    }

    /// Class prototypes (`A × D`) and the cue vector.
    pub fn prototypes(&self) -> (Tensor, Vec<f64>) {
        let mut rng = stream(self.prototype_seed, &[0x5052_4f54]);
        let mut axes: Vec<usize> = (0..self.dim).collect();
        axes.shuffle(&mut rng);
        let mut protos = vec![0.0; self.answers * self.dim];
        for a in 0..self.answers {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            protos[a * self.dim + axes[a]] = sign;
        }
        let mut cue = vec![0.0; self.dim];
        cue[axes[self.answers]] = 1.0;
        (Tensor::matrix(self.answers, self.dim, protos).expect("positive extents"), cue)
    }
}

/// Ground-truth placement of the planted events, in temporal order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Planted {
    pub segments: Vec<usize>,
    pub frames: Vec<usize>,
    pub patches: Vec<usize>,
    pub classes: Vec<usize>,
    pub relation: Relation,
    /// Class named by the question, for relational tasks.
    pub cue_class: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSample {
    pub video: VideoFeatures,
    pub question: QuestionFeatures,
    pub answers: AnswerBank,
    pub label: usize,
    pub planted: Planted,
}

fn round_f32(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}

pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<SynthSample> {
    cfg.validate()?;
    let (k, t, n, d) = (cfg.segments, cfg.frames_per_segment, cfg.patches, cfg.dim);
    let (protos, cue) = cfg.prototypes();
    let mut rng = stream(seed, &[0x5341_4d50]);
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| if cfg.noise_std == 0.0 { 0.0 } else { noise.sample(rng) };

    let (event_segments, classes, relation, cue_class) = match cfg.task {
        TaskKind::SingleEvent => {
            let s = rng.random_range(0..k);
            let y = rng.random_range(0..cfg.answers);
            (vec![s], vec![y], Relation::None, None)
        }
        TaskKind::MultiEventOrder => {
            let mut segs: Vec<usize> = (0..k).collect();
            segs.shuffle(&mut rng);
            let mut pair = [segs[0], segs[1]];
            pair.sort_unstable();
            let mut cls: Vec<usize> = (0..cfg.answers).collect();
            cls.shuffle(&mut rng);
            (pair.to_vec(), vec![cls[0], cls[1]], Relation::After, Some(cls[0]))
        }
    };
    let frames: Vec<usize> = event_segments.iter().map(|_| rng.random_range(0..t)).collect();
    let patches: Vec<usize> = event_segments.iter().map(|_| rng.random_range(0..n)).collect();

    let mut video = vec![0.0; k * t * n * d];
    for v in video.iter_mut() {
        *v = draw(&mut rng);
    }
    for (e, &s) in event_segments.iter().enumerate() {
        for tt in 0..t {
            for nn in 0..n {
                let row = ((s * t + tt) * n + nn) * d;
                let patch = &mut video[row..row + d];
                if tt == frames[e] && nn == patches[e] {
                    patch.copy_from_slice(protos.row(classes[e]));
                } else {
                    for (p, c) in patch.iter_mut().zip(&cue) {
                        *p += cfg.cue_strength * c;
                    }
                }
            }
        }
    }

    let mut query = cue.clone();
    if let Some(c) = cue_class {
        for (q, p) in query.iter_mut().zip(protos.row(c)) {
            *q += p;
        }
    }
    let mut words = Vec::with_capacity(cfg.words * d);
    for _ in 0..cfg.words {
        for &q in &query {
            words.push(q + draw(&mut rng));
        }
    }

    let mut video = Tensor::new(vec![k, t, n, d], video)?;
    let mut words = Tensor::matrix(cfg.words, d, words)?;
    let mut answers = protos;
    round_f32(&mut video);
    round_f32(&mut words);
    round_f32(&mut answers);

    let planted = Planted {
        segments: event_segments,
        frames,
        patches,
        classes,
        relation,
        cue_class,
    };
    let label = oracle_label(&planted)?;
    Ok(SynthSample {
        video: VideoFeatures::new(video, false, false)?,
        question: QuestionFeatures::new(words)?,
        answers: AnswerBank::indexed(answers)?,
        label,
        planted,
    })
}

/// Recovers the answer from planted metadata alone.
pub fn oracle_label(planted: &Planted) -> Result<usize> {
    match planted.relation {
        Relation::None => planted
            .classes
            .first()
            .copied()
            .ok_or_else(|| MistError::Invalid("no planted event".into())),
        Relation::After => {
            let cue = planted
                .cue_class
                .ok_or_else(|| MistError::Invalid("relational sample without cue class".into()))?;
            let mut events: Vec<(usize, usize)> = planted
                .segments
                .iter()
                .copied()
                .zip(planted.classes.iter().copied())
                .collect();
            events.sort_unstable();
            let at = events
                .iter()
                .position(|&(_, c)| c == cue)
                .ok_or_else(|| MistError::Invalid("cue class not planted".into()))?;
            events
                .get(at + 1)
                .map(|&(_, c)| c)
                .ok_or_else(|| MistError::Invalid("no event after the cue event".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_planted_patch_is_prototype() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            ..SynthConfig::default()
        };
        for seed in 0..20 {
            let s = generate_synthetic(&cfg, seed).unwrap();
            let p = &s.planted;
            let patch = s.video.patch(p.segments[0], p.frames[0], p.patches[0]);
            assert_eq!(patch, s.answers.a.row(s.label));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig::default();
        assert_eq!(generate_synthetic(&cfg, 11).unwrap(), generate_synthetic(&cfg, 11).unwrap());
        assert_ne!(generate_synthetic(&cfg, 11).unwrap(), generate_synthetic(&cfg, 12).unwrap());
    }

    #[test]
    fn prototypes_orthonormal_and_cue_orthogonal() {
        let cfg = SynthConfig::default();
        let (p, cue) = cfg.prototypes();
        for i in 0..cfg.answers {
            let pi = p.row(i);
            assert_eq!(pi.iter().map(|v| v * v).sum::<f64>(), 1.0);
            assert_eq!(pi.iter().zip(&cue).map(|(a, b)| a * b).sum::<f64>(), 0.0);
            for j in i + 1..cfg.answers {
                assert_eq!(pi.iter().zip(p.row(j)).map(|(a, b)| a * b).sum::<f64>(), 0.0);
            }
        }
    }

    #[test]
    fn multi_event_label_is_later_event() {
        let planted = Planted {
            segments: vec![2, 5],
            frames: vec![0, 1],
            patches: vec![3, 3],
            classes: vec![1, 3],
            relation: Relation::After,
            cue_class: Some(1),
        };
        assert_eq!(oracle_label(&planted).unwrap(), 3);

        let cfg = SynthConfig {
            task: TaskKind::MultiEventOrder,
            ..SynthConfig::default()
        };
        for seed in 0..50 {
            let s = generate_synthetic(&cfg, seed).unwrap();
            let p = &s.planted;
            assert!(p.segments[0] < p.segments[1]);
            assert_ne!(p.classes[0], p.classes[1]);
            assert_eq!(s.label, p.classes[1]);
        }
    }

    #[test]
    fn rejects_too_many_answers() {
        let cfg = SynthConfig {
            answers: 8,
            dim: 8,
            ..SynthConfig::tiny()
        };
        assert!(generate_synthetic(&cfg, 0).is_err());
    }
}
