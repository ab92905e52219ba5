//! Run configuration, read from a flat TOML table whose keys are exactly the
//! field names of [`TrainConfig`].

use std::collections::BTreeSet;
use std::path::Path;

use mist_core::features::{PoolMode, SynthConfig, TaskKind};
use mist_core::ista::{IstaConfig, Variant};
use mist_core::selection::{SelectorKind, SelectorMode};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Mist,
    Meanpool,
    TransFrame,
    TransPatch,
    DividedSta,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Mist,
        ModelKind::Meanpool,
        ModelKind::TransFrame,
        ModelKind::TransPatch,
        ModelKind::DividedSta,
    ];
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    NoSs,
    NoRs,
    NoSta,
}

impl Ablation {
    pub fn variant(self) -> Variant {
        match self {
            Ablation::None => Variant::Full,
            Ablation::NoSs => Variant::NoSegmentSelection,
            Ablation::NoRs => Variant::NoRegionSelection,
            Ablation::NoSta => Variant::NoJointAttention,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub ablation: Ablation,
    pub task: TaskKind,
    /// `K`
    pub segments: usize,
    /// Frames per video, `K·T`.
    pub frames: usize,
    /// `N`
    pub patches: usize,
    /// `D`
    pub dim: usize,
    /// `M`
    pub words: usize,
    /// `A`
    pub answers: usize,
    pub top_k: usize,
    pub top_j: usize,
    pub layers: usize,
    pub heads: usize,
    pub selector: SelectorKind,
    pub temp_start: f64,
    pub temp_end: f64,
    pub residual_norm: bool,
    pub cosine_scores: bool,
    pub pool: PoolMode,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_samples: usize,
    /// Evaluate every this many steps; 0 evaluates only after the last step.
    pub eval_every: usize,
    pub noise_std: f64,
    pub cue_strength: f64,
    pub prototype_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Mist,
            ablation: Ablation::None,
            task: TaskKind::SingleEvent,
            segments: 8,
            frames: 32,
            patches: 16,
            dim: 32,
            words: 8,
            answers: 4,
            top_k: 2,
            top_j: 12,
            layers: 2,
            heads: 4,
            selector: SelectorKind::GumbelWithReplacement,
            temp_start: 1.0,
            temp_end: 0.5,
            residual_norm: true,
            cosine_scores: false,
            pool: PoolMode::Mean,
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            steps: 1000,
            batch_size: 16,
            seed: 0,
            eval_samples: 200,
            eval_every: 0,
            noise_std: 0.1,
            cue_strength: 0.25,
            prototype_seed: 0,
        }
    }
}

impl TrainConfig {
    /// Smallest configuration, used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            segments: 2,
            frames: 4,
            patches: 4,
            dim: 8,
            words: 3,
            answers: 3,
            top_k: 1,
            top_j: 2,
            heads: 2,
            ..Self::default()
        }
    }

    pub fn frames_per_segment(&self) -> usize {
        self.frames / self.segments.max(1)
    }

    /// Field names a config file must define.
    pub fn keys() -> BTreeSet<String> {
        match toml::Value::try_from(Self::default()) {
            Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
            _ => unreachable!("config serializes to a table"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let dims = [
            ("segments", self.segments),
            ("frames", self.frames),
            ("patches", self.patches),
            ("dim", self.dim),
            ("words", self.words),
            ("answers", self.answers),
            ("layers", self.layers),
            ("heads", self.heads),
            ("top_k", self.top_k),
            ("top_j", self.top_j),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if !self.frames.is_multiple_of(self.segments) {
            return bad(format!("frames {} is not a multiple of segments {}", self.frames, self.segments));
        }
        // TOML integers are signed 64-bit.
        for (name, v) in [("seed", self.seed), ("prototype_seed", self.prototype_seed)] {
            if v > i64::MAX as u64 {
                return bad(format!("{name} {v} exceeds the TOML integer range"));
            }
        }
        if self.ablation != Ablation::None && self.model != ModelKind::Mist {
            return bad("ablation applies only to model = \"mist\"".into());
        }
        if !(self.temp_start > 0.0 && self.temp_end > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if !(self.lr > 0.0 && self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay non-negative".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)".into());
        }
        self.ista()?.validate()?;
        self.synth().validate()?;
        Ok(())
    }

    /// Temperature at `step`: linear from `temp_start` to `temp_end`.
    pub fn temperature(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.temp_start;
        }
        let f = step.min(self.steps - 1) as f64 / (self.steps - 1) as f64;
        self.temp_start + (self.temp_end - self.temp_start) * f
    }

    pub fn ista(&self) -> Result<IstaConfig> {
        Ok(IstaConfig {
            segments: self.segments,
            frames_per_segment: self.frames_per_segment(),
            patches: self.patches,
            dim: self.dim,
            words: self.words,
            top_k: self.top_k,
            top_j: self.top_j,
            layers: self.layers,
            heads: self.heads,
            selector: SelectorMode::new(self.selector, self.temp_start)?,
            residual_norm: self.residual_norm,
            pool: self.pool,
            variant: self.ablation.variant(),
        })
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            segments: self.segments,
            frames_per_segment: self.frames_per_segment(),
            patches: self.patches,
            dim: self.dim,
            words: self.words,
            answers: self.answers,
            task: self.task,
            noise_std: self.noise_std,
            cue_strength: self.cue_strength,
            prototype_seed: self.prototype_seed,
        }
    }

    /// Parses a config, naming every missing and unknown key.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.message().to_string()))?;
        let present: BTreeSet<String> = table.keys().cloned().collect();
        let expected = Self::keys();
        let missing: Vec<&str> = expected.difference(&present).map(String::as_str).collect();
        let unknown: Vec<&str> = present.difference(&expected).map(String::as_str).collect();
        if !missing.is_empty() || !unknown.is_empty() {
            let mut parts = Vec::new();
            if !missing.is_empty() {
                parts.push(format!("missing keys: {}", missing.join(", ")));
            }
            if !unknown.is_empty() {
                parts.push(format!("unknown keys: {}", unknown.join(", ")));
            }
            return Err(HarnessError::Config(parts.join("; ")));
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut cfg = TrainConfig::default();
        cfg.lr = 3.0e-4;
        cfg.noise_std = 0.1;
        cfg.temp_end = 0.3;
        cfg.model = ModelKind::DividedSta;
        let text = cfg.to_toml_string();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn missing_and_unknown_keys_are_named() {
        let text = TrainConfig::default().to_toml_string();
        let trimmed: String = text
            .lines()
            .filter(|l| !l.starts_with("lr ") && !l.starts_with("top_j "))
            .map(|l| format!("{l}\n"))
            .collect();
        let err = TrainConfig::from_toml_str(&format!("{trimmed}learning_rate = 0.1\n")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("missing keys: lr, top_j"), "{msg}");
        assert!(msg.contains("unknown keys: learning_rate"), "{msg}");
    }

    #[test]
    fn invalid_combinations_rejected() {
        let cfg = TrainConfig {
            model: ModelKind::TransPatch,
            ablation: Ablation::NoSs,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            frames: 30,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            selector: SelectorKind::GumbelWithoutReplacement,
            top_k: 9,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            top_k: 9,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn temperature_anneals_linearly() {
        let cfg = TrainConfig {
            steps: 11,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.temperature(0), 1.0);
        assert!((cfg.temperature(5) - 0.75).abs() < 1e-12);
        assert_eq!(cfg.temperature(10), 0.5);
        assert_eq!(cfg.temperature(50), 0.5);
    }
}
