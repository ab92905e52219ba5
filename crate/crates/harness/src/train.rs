//! Training and evaluation on synthetic planted-event tasks.

use std::time::Instant;

use mist_core::features::{generate_synthetic, SynthSample};
use mist_core::numerics::gradcheck::compare_gradients;
use mist_core::numerics::{argmax, GradCheckReport, Graph, Tensor};
use mist_core::rng::derive_seed;
use mist_core::selection::Noise;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{HarnessError, Result};
use crate::model::Model;
use crate::optim::AdamW;

const TRAIN_DATA: u64 = 0x5452_4149;
const TRAIN_NOISE: u64 = 0x4e4f_4953;
const EVAL_DATA: u64 = 0x4556_414c;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub acc: Option<f64>,
    pub hit_rate: Option<f64>,
    /// Forward-pass multiply-accumulates per sample, in millions.
    pub mmacs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
    /// Not part of the reproducible record.
    pub wall_seconds: f64,
}

impl MetricsLog {
    pub fn last_eval(&self) -> Option<&MetricsRow> {
        self.rows.iter().rev().find(|r| r.acc.is_some())
    }

    pub fn write_csv(&self, w: impl std::io::Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "loss", "acc", "hit_rate", "mmacs"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            out.write_record([
                r.step.to_string(),
                r.loss.to_string(),
                opt(r.acc),
                opt(r.hit_rate),
                r.mmacs.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: Option<f64>,
    /// Fraction of samples whose planted segments were all selected in
    /// some layer; absent for models without segment selection.
    pub hit_rate: Option<f64>,
    pub mmacs: f64,
}

/// Worker pool sized by `MIST_THREADS` when set.
pub fn thread_pool() -> rayon::ThreadPool {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("MIST_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        b = b.num_threads(n.max(1));
    }
    b.build().expect("thread pool")
}

pub fn eval_sample(cfg: &TrainConfig, seed: u64, i: usize) -> Result<SynthSample> {
    Ok(generate_synthetic(&cfg.synth(), derive_seed(seed, &[EVAL_DATA, i as u64]))?)
}

struct SampleOutcome {
    correct: bool,
    hit: Option<bool>,
    macs: u64,
}

fn eval_one(model: &Model, sample: &SynthSample) -> Result<SampleOutcome> {
    let mut g = Graph::new();
    let f = model.forward(&mut g, sample, &mut Noise::Eval, model.config.temp_end)?;
    let correct = argmax(g.value(f.scores).data()) == Some(sample.label);
    let hit = f.trace.as_ref().and_then(|t| {
        t.layers.iter().any(|l| l.temporal.is_some()).then(|| {
            let chosen = t.selected_segments();
            sample.planted.segments.iter().all(|s| chosen.contains(s))
        })
    });
    Ok(SampleOutcome {
        correct,
        hit,
        macs: g.macs(),
    })
}

/// Deterministic-selection evaluation on `n` fresh samples drawn from `seed`.
pub fn evaluate(model: &Model, n: usize, seed: u64) -> Result<EvalReport> {
    let outcomes: Vec<SampleOutcome> = thread_pool().install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| eval_one(model, &eval_sample(&model.config, seed, i)?))
            .collect::<Result<_>>()
    })?;
    if outcomes.is_empty() {
        return Ok(EvalReport {
            samples: 0,
            accuracy: None,
            hit_rate: None,
            mmacs: 0.0,
        });
    }
    let n = outcomes.len() as f64;
    let hits: Vec<bool> = outcomes.iter().filter_map(|o| o.hit).collect();
    Ok(EvalReport {
        samples: outcomes.len(),
        accuracy: Some(outcomes.iter().filter(|o| o.correct).count() as f64 / n),
        hit_rate: (!hits.is_empty()).then(|| hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64),
        mmacs: outcomes.iter().map(|o| o.macs as f64).sum::<f64>() / n / 1e6,
    })
}

struct StepSample {
    loss: f64,
    grads: Vec<Tensor>,
    macs: u64,
}

fn sample_gradient(model: &Model, step: usize, b: usize) -> Result<StepSample> {
    let cfg = &model.config;
    let sample = generate_synthetic(&cfg.synth(), derive_seed(cfg.seed, &[TRAIN_DATA, step as u64, b as u64]))?;
    let mut noise = Noise::Fresh {
        seed: derive_seed(cfg.seed, &[TRAIN_NOISE, step as u64, b as u64]),
    };
    let mut g = Graph::new();
    let (loss, _) = model.loss_with(&mut g, &model.store, &sample, &mut noise, cfg.temperature(step))?;
    let macs = g.macs();
    g.backward(loss)?;
    Ok(StepSample {
        loss: g.value(loss).item(),
        grads: g.param_grads(&model.store),
        macs,
    })
}

/// Seed of the evaluation set used during training.
pub fn eval_seed(cfg: &TrainConfig) -> u64 {
    derive_seed(cfg.seed, &[EVAL_DATA])
}

/// Trains from a fresh initialisation.
pub fn train(cfg: &TrainConfig) -> Result<(Model, MetricsLog)> {
    let mut model = Model::init(cfg)?;
    let log = train_model(&mut model)?;
    Ok((model, log))
}

pub fn train_model(model: &mut Model) -> Result<MetricsLog> {
    let start = Instant::now();
    let cfg = model.config.clone();
    let pool = thread_pool();
    let mut opt = AdamW::new(&model.store, cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut log = MetricsLog::default();
    let eval_set = eval_seed(&cfg);
    for step in 0..cfg.steps {
        let m: &Model = model;
        let results: Vec<StepSample> = pool
            .install(|| {
                (0..cfg.batch_size)
                    .into_par_iter()
                    .map(|b| sample_gradient(m, step, b))
                    .collect::<Result<_>>()
            })
            .map_err(|e| HarnessError::Diverged {
                step,
                detail: e.to_string(),
            })?;
        // Fixed-order reduction keeps the sum independent of scheduling.
        let mut grads = model.store.zeros_like();
        let mut loss = 0.0;
        let mut macs = 0.0;
        let scale = 1.0 / cfg.batch_size as f64;
        for r in &results {
            loss += r.loss * scale;
            macs += r.macs as f64 * scale;
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, x)| *a += x * scale);
            }
        }
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(HarnessError::Diverged {
                step,
                detail: format!("loss {loss}"),
            });
        }
        opt.step(&mut model.store, &grads);
        let last = step + 1 == cfg.steps;
        let eval_now = last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0);
        let (acc, hit_rate) = if eval_now && cfg.eval_samples > 0 {
            let r = evaluate(model, cfg.eval_samples, eval_set)?;
            (r.accuracy, r.hit_rate)
        } else {
            (None, None)
        };
        log.rows.push(MetricsRow {
            step: step + 1,
            loss,
            acc,
            hit_rate,
            mmacs: macs / 1e6,
        });
    }
    log.wall_seconds = start.elapsed().as_secs_f64();
    Ok(log)
}

/// End-to-end finite-difference check of the loss on one sample, with the
/// selection noise and hard choices frozen at their first-pass values.
pub fn model_grad_check(model: &Model, sample_seed: u64, eps: f64) -> Result<GradCheckReport> {
    let cfg = &model.config;
    let sample = generate_synthetic(&cfg.synth(), sample_seed)?;
    let temperature = cfg.temp_start;
    let mut record = Noise::Record {
        seed: derive_seed(sample_seed, &[TRAIN_NOISE]),
        log: Vec::new(),
    };
    {
        let mut g = Graph::new();
        model.loss_with(&mut g, &model.store, &sample, &mut record, temperature)?;
    }
    let Noise::Record { log, .. } = record else { unreachable!() };
    let loss_fn = |store: &mist_core::numerics::ParamStore, g: &mut Graph| {
        let mut replay = Noise::Replay {
            log: log.clone(),
            cursor: 0,
        };
        model
            .loss_with(g, store, &sample, &mut replay, temperature)
            .map(|(l, _)| l)
            .map_err(|e| match e {
                HarnessError::Core(c) => c,
                other => mist_core::MistError::Invalid(other.to_string()),
            })
    };
    let analytic = mist_core::numerics::gradcheck::analytic_gradients(&loss_fn, &model.store)?;
    Ok(compare_gradients(loss_fn, &model.store, eps, &analytic)?)
}
