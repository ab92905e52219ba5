//! One-axis configuration sweeps. Every value is trained with the same list
//! of seeds so that runs differ only along the swept axis.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{HarnessError, Result};
use crate::train::train;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    TopK,
    TopJ,
    Layers,
    Segments,
    Frames,
}

impl Axis {
    pub fn apply(self, base: &TrainConfig, value: usize) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Axis::TopK => c.top_k = value,
            Axis::TopJ => c.top_j = value,
            Axis::Layers => c.layers = value,
            Axis::Segments => c.segments = value,
            Axis::Frames => c.frames = value,
        }
        c
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::TopK => "top_k",
            Axis::TopJ => "top_j",
            Axis::Layers => "layers",
            Axis::Segments => "segments",
            Axis::Frames => "frames",
        })
    }
}

impl FromStr for Axis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "top_k" => Axis::TopK,
            "top_j" => Axis::TopJ,
            "layers" | "L" => Axis::Layers,
            "segments" | "K" => Axis::Segments,
            "frames" => Axis::Frames,
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown sweep axis {other:?}; expected top_k, top_j, layers, segments or frames"
                )))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: Axis,
    pub value: usize,
    pub seed: u64,
    pub final_loss: f64,
    pub accuracy: Option<f64>,
    pub hit_rate: Option<f64>,
    pub mmacs: f64,
}

/// Every derived config, checked before any training starts.
pub fn sweep_configs(base: &TrainConfig, axis: Axis, values: &[usize], seeds: &[u64]) -> Result<Vec<TrainConfig>> {
    let mut out = Vec::with_capacity(values.len() * seeds.len());
    for &v in values {
        let cfg = axis.apply(base, v);
        cfg.validate()
            .map_err(|e| HarnessError::Config(format!("{axis} = {v}: {e}")))?;
        for &seed in seeds {
            out.push(TrainConfig { seed, ..cfg.clone() });
        }
    }
    Ok(out)
}

pub fn sweep(base: &TrainConfig, axis: Axis, values: &[usize], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    let configs = sweep_configs(base, axis, values, seeds)?;
    let mut rows = Vec::with_capacity(configs.len());
    for (i, cfg) in configs.iter().enumerate() {
        let (_, log) = train(cfg)?;
        let last = log.rows.last();
        let eval = log.last_eval();
        rows.push(SweepRow {
            axis,
            value: values[i / seeds.len()],
            seed: cfg.seed,
            final_loss: last.map_or(f64::NAN, |r| r.loss),
            accuracy: eval.and_then(|r| r.acc),
            hit_rate: eval.and_then(|r| r.hit_rate),
            mmacs: last.map_or(0.0, |r| r.mmacs),
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], w: impl std::io::Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["axis", "value", "seed", "final_loss", "acc", "hit_rate", "mmacs"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        out.write_record([
            r.axis.to_string(),
            r.value.to_string(),
            r.seed.to_string(),
            r.final_loss.to_string(),
            opt(r.accuracy),
            opt(r.hit_rate),
            r.mmacs.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Median of the present values; the mean of the middle pair for even counts.
pub fn median(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

/// Median accuracy over seeds for one swept value.
pub fn median_accuracy(rows: &[SweepRow], value: usize) -> Option<f64> {
    median(rows.iter().filter(|r| r.value == value).filter_map(|r| r.accuracy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mist_core::selection::SelectorKind;

    #[test]
    fn layer_sweep_differs_only_in_layers() {
        let base = TrainConfig::tiny();
        let cfgs = sweep_configs(&base, Axis::Layers, &[1, 2, 3], &[base.seed]).unwrap();
        assert_eq!(cfgs.len(), 3);
        for (c, l) in cfgs.iter().zip([1, 2, 3]) {
            assert_eq!(*c, TrainConfig { layers: l, ..base.clone() });
        }
    }

    #[test]
    fn top_k_above_segments_rejected_only_without_replacement() {
        let base = TrainConfig {
            segments: 4,
            frames: 8,
            ..TrainConfig::default()
        };
        assert!(sweep_configs(&base, Axis::TopK, &[2, 5], &[0]).is_ok());
        let wor = TrainConfig {
            selector: SelectorKind::GumbelWithoutReplacement,
            ..base
        };
        assert!(sweep_configs(&wor, Axis::TopK, &[2, 4], &[0]).is_ok());
        let err = sweep_configs(&wor, Axis::TopK, &[2, 5], &[0]).unwrap_err();
        assert!(err.to_string().contains("top_k = 5"), "{err}");
    }

    #[test]
    fn seeds_shared_across_values() {
        let base = TrainConfig::tiny();
        let cfgs = sweep_configs(&base, Axis::TopJ, &[1, 2], &[7, 9]).unwrap();
        let seeds: Vec<u64> = cfgs.iter().map(|c| c.seed).collect();
        assert_eq!(seeds, [7, 9, 7, 9]);
    }

    #[test]
    fn small_sweep_writes_csv() {
        let base = TrainConfig {
            steps: 2,
            batch_size: 2,
            eval_samples: 4,
            ..TrainConfig::tiny()
        };
        let rows = sweep(&base, Axis::TopJ, &[1, 2], &[0]).unwrap();
        assert_eq!(rows.len(), 2);
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("axis,value,seed,final_loss,acc,hit_rate,mmacs\n"));
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().starts_with("top_j,1,0,"));
    }

    #[test]
    fn median_examples() {
        assert_eq!(median([3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median([4.0, 1.0]), Some(2.5));
        assert_eq!(median(Vec::<f64>::new()), None);
    }

    #[test]
    fn axis_names_round_trip() {
        for a in [Axis::TopK, Axis::TopJ, Axis::Layers, Axis::Segments, Axis::Frames] {
            assert_eq!(a.to_string().parse::<Axis>().unwrap(), a);
        }
        assert!("depth".parse::<Axis>().is_err());
    }
}
