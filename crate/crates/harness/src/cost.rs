//! Closed-form multiply-accumulate counts for one forward pass.
//!
//! A self-attention site over `n` tokens of width `D` costs `4·n·D²` for the
//! query, key, value and output projections plus `2·n²·D` for scores and
//! mixing. A selection site projects the pooled question once (`D²`), its
//! `c` candidates (`c·D²`), and scores them (`c·D`). Element-wise work
//! (pooling, softmax, normalisation, embeddings) is not counted, matching the
//! counter in the tape, which only charges `linear` and the two matmuls.

use mist_core::features::generate_synthetic;
use mist_core::ista::Variant;
use mist_core::numerics::Graph;
use mist_core::selection::{Noise, SelectorKind};
use serde::{Deserialize, Serialize};

use crate::config::{ModelKind, TrainConfig};
use crate::error::Result;
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteCost {
    pub name: String,
    /// How many times the site runs per forward pass.
    pub count: usize,
    /// Tokens (attention) or candidates (selection) per run.
    pub tokens: usize,
    pub macs: u64,
    /// The `2·n²·D` part of `macs`, zero for non-attention sites.
    pub quadratic_macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub model: ModelKind,
    pub variant: Variant,
    pub layers: usize,
    /// Joint-attention tokens per MIST layer for this configuration.
    pub n_mist: usize,
    /// Tokens of one dense patch-level attention site.
    pub n_dense: usize,
    pub sites: Vec<SiteCost>,
    pub total_macs: u64,
    pub quadratic_macs: u64,
    pub dense_total_macs: u64,
    pub dense_quadratic_macs: u64,
    /// `dense_total_macs / total_macs`.
    pub total_ratio: f64,
    /// `dense_quadratic_macs / quadratic_macs`; infinite without attention.
    pub quadratic_ratio: f64,
}

struct Sites {
    d: u64,
    list: Vec<SiteCost>,
}

impl Sites {
    fn new(d: usize) -> Self {
        Self { d: d as u64, list: Vec::new() }
    }

    fn push(&mut self, name: String, count: usize, tokens: usize, macs: u64, quadratic: u64) {
        self.list.push(SiteCost {
            name,
            count,
            tokens,
            macs: macs * count as u64,
            quadratic_macs: quadratic * count as u64,
        });
    }

    fn attention(&mut self, name: String, count: usize, n: usize) {
        let (n64, d) = (n as u64, self.d);
        self.push(name, count, n, 4 * n64 * d * d + 2 * n64 * n64 * d, 2 * n64 * n64 * d);
    }

    fn projection(&mut self, name: String, rows: usize) {
        let d = self.d;
        self.push(name, 1, rows, rows as u64 * d * d, 0);
    }

    /// One query against `candidates` keys, run `count` times. The query
    /// projection is shared across runs, so it is charged once.
    fn selection(&mut self, name: String, count: usize, candidates: usize, parametric: bool) {
        let (c, d) = (candidates as u64, self.d);
        let per_run = if parametric { c * d * d + c * d } else { c * d };
        let shared = if parametric { d * d } else { 0 };
        self.list.push(SiteCost {
            name,
            count,
            tokens: candidates,
            macs: shared + per_run * count as u64,
            quadratic_macs: 0,
        });
    }
}

fn dense_sites(cfg: &TrainConfig) -> Sites {
    let (f, n, m) = (cfg.frames, cfg.patches, cfg.words);
    let mut s = Sites::new(cfg.dim);
    s.projection("visual_projection".into(), f * n);
    s.projection("word_projection".into(), m);
    s.attention("attention".into(), 1, f * n + m);
    s.push("answer".into(), 1, cfg.answers, (cfg.answers * cfg.dim) as u64, 0);
    s
}

fn sites(cfg: &TrainConfig) -> Result<Sites> {
    let (f, n, m, d) = (cfg.frames, cfg.patches, cfg.words, cfg.dim);
    let mut s = Sites::new(d);
    match cfg.model {
        ModelKind::Mist => {
            let ista = cfg.ista()?;
            let (k, t) = (ista.segments, ista.frames_per_segment);
            let parametric = ista.selector.kind != SelectorKind::Nonparametric;
            let tokens = ista.tokens_per_layer();
            for l in 0..ista.layers {
                let selected_frames = match ista.variant {
                    Variant::NoSegmentSelection => f,
                    _ => ista.top_k * t,
                };
                if ista.variant != Variant::NoSegmentSelection {
                    s.selection(format!("layer{l}.temporal_selection"), 1, k, parametric);
                }
                if ista.variant != Variant::NoRegionSelection {
                    s.selection(format!("layer{l}.spatial_selection"), selected_frames, n, parametric);
                }
                if ista.variant != Variant::NoJointAttention {
                    s.projection(format!("layer{l}.token_projection"), tokens);
                    s.attention(format!("layer{l}.attention"), 1, tokens);
                }
            }
        }
        ModelKind::Meanpool => {
            s.projection("frame_projection".into(), f);
            s.projection("word_projection".into(), m);
        }
        ModelKind::TransFrame => {
            s.projection("visual_projection".into(), f);
            s.projection("word_projection".into(), m);
            s.attention("attention".into(), 1, f + m);
        }
        ModelKind::TransPatch => return Ok(dense_sites(cfg)),
        ModelKind::DividedSta => {
            s.projection("patch_projection".into(), f * n);
            if f > 1 {
                s.attention("temporal_attention".into(), n, f);
            }
            s.attention("spatial_attention".into(), f, n);
            s.projection("word_projection".into(), m);
        }
    }
    s.push("answer".into(), 1, cfg.answers, (cfg.answers * d) as u64, 0);
    Ok(s)
}

pub fn cost_estimate(cfg: &TrainConfig) -> Result<CostReport> {
    cfg.validate()?;
    let ista = cfg.ista()?;
    let own = sites(cfg)?.list;
    let dense = dense_sites(cfg).list;
    let sum = |v: &[SiteCost], f: fn(&SiteCost) -> u64| v.iter().map(f).sum::<u64>();
    let total_macs = sum(&own, |s| s.macs);
    let quadratic_macs = sum(&own, |s| s.quadratic_macs);
    let dense_total_macs = sum(&dense, |s| s.macs);
    let dense_quadratic_macs = sum(&dense, |s| s.quadratic_macs);
    let ratio = |a: u64, b: u64| if b == 0 { f64::INFINITY } else { a as f64 / b as f64 };
    Ok(CostReport {
        model: cfg.model,
        variant: ista.variant,
        layers: cfg.layers,
        n_mist: ista.tokens_per_layer(),
        n_dense: cfg.frames * cfg.patches + cfg.words,
        sites: own,
        total_macs,
        quadratic_macs,
        dense_total_macs,
        dense_quadratic_macs,
        total_ratio: ratio(dense_total_macs, total_macs),
        quadratic_ratio: ratio(dense_quadratic_macs, quadratic_macs),
    })
}

/// Multiply-accumulates charged by the tape for one eval-mode forward pass
/// on a synthetic sample.
pub fn measured_macs(model: &Model, sample_seed: u64) -> Result<u64> {
    let sample = generate_synthetic(&model.config.synth(), sample_seed)?;
    let mut g = Graph::new();
    let temperature = model.config.temperature(model.config.steps);
    model.forward(&mut g, &sample, &mut Noise::Eval, temperature)?;
    Ok(g.macs())
}
