//! A trainable model of any kind, with parameter save and load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use mist_core::answer::score_answers_graph;
use mist_core::features::{SynthSample, QuestionFeatures, VideoFeatures};
use mist_core::ista::{mist_forward, AttentionTrace, IstaConfig, MistParams};
use mist_core::numerics::{Graph, ParamStore, Tensor, Var};
use mist_core::rng::stream;
use mist_core::selection::Noise;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    divided_sta_forward, meanpool_forward, trans_frame_forward, trans_patch_forward, DenseParams, Dims, DividedParams,
    MeanpoolParams,
};
use crate::config::{ModelKind, TrainConfig};
use crate::error::{HarnessError, Result};

const PARAMS_MAGIC: &[u8; 8] = b"MISTPARM";
const INIT_STREAM: u64 = 0x494e_4954;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Arch {
    Mist(MistParams),
    Meanpool(MeanpoolParams),
    TransFrame(DenseParams),
    TransPatch(DenseParams),
    DividedSta(DividedParams),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub arch: Arch,
    ista: IstaConfig,
}

pub struct Forward {
    pub scores: Var,
    pub trace: Option<AttentionTrace>,
}

impl Model {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let ista = config.ista()?;
        let mut rng = stream(config.seed, &[INIT_STREAM]);
        let mut store = ParamStore::new();
        let d = Self::dims(config);
        let arch = match config.model {
            ModelKind::Mist => Arch::Mist(MistParams::init(&mut store, &ista, &mut rng)?),
            ModelKind::Meanpool => Arch::Meanpool(MeanpoolParams::init(&mut store, &d, &mut rng)),
            ModelKind::TransFrame => Arch::TransFrame(DenseParams::init(&mut store, &d, &mut rng)?),
            ModelKind::TransPatch => Arch::TransPatch(DenseParams::init(&mut store, &d, &mut rng)?),
            ModelKind::DividedSta => Arch::DividedSta(DividedParams::init(&mut store, &d, &mut rng)?),
        };
        Ok(Self {
            config: config.clone(),
            store,
            arch,
            ista,
        })
    }

    fn dims(c: &TrainConfig) -> Dims {
        Dims {
            frames: c.frames,
            patches: c.patches,
            dim: c.dim,
            words: c.words,
            heads: c.heads,
            residual_norm: c.residual_norm,
        }
    }

    pub fn ista_config(&self) -> &IstaConfig {
        &self.ista
    }

    /// Answer scores for one sample, evaluated with the parameter values in
    /// `store` (which must share this model's layout).
    #[allow(clippy::too_many_arguments)]
    pub fn forward_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        video: &VideoFeatures,
        question: &QuestionFeatures,
        answers: &Tensor,
        noise: &mut Noise,
        temperature: f64,
    ) -> Result<Forward> {
        let d = Self::dims(&self.config);
        let (pooled, trace) = match &self.arch {
            Arch::Mist(p) => {
                let mut cfg = self.ista.clone();
                cfg.selector.temperature = temperature;
                let out = mist_forward(g, store, &cfg, p, video, question, noise)?;
                (out.pooled, Some(out.trace))
            }
            other => {
                let v = g.constant(video.tensor().as_matrix());
                let w = g.constant(question.w.clone());
                let pooled = match other {
                    Arch::Meanpool(p) => meanpool_forward(g, store, p, &d, v, w)?,
                    Arch::TransFrame(p) => trans_frame_forward(g, store, p, &d, v, w)?,
                    Arch::TransPatch(p) => trans_patch_forward(g, store, p, &d, v, w)?,
                    Arch::DividedSta(p) => divided_sta_forward(g, store, p, &d, v, w)?,
                    Arch::Mist(_) => unreachable!(),
                };
                (pooled, None)
            }
        };
        let a = g.constant(answers.clone());
        let scores = score_answers_graph(g, pooled, a, self.config.cosine_scores)?;
        Ok(Forward { scores, trace })
    }

    pub fn forward(&self, g: &mut Graph, sample: &SynthSample, noise: &mut Noise, temperature: f64) -> Result<Forward> {
        self.forward_with(g, &self.store, &sample.video, &sample.question, &sample.answers.a, noise, temperature)
    }

    /// Cross-entropy loss node for one labelled sample.
    pub fn loss_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sample: &SynthSample,
        noise: &mut Noise,
        temperature: f64,
    ) -> Result<(Var, Forward)> {
        let fwd = self.forward_with(g, store, &sample.video, &sample.question, &sample.answers.a, noise, temperature)?;
        let loss = g.cross_entropy(fwd.scores, sample.label)?;
        Ok((loss, fwd))
    }

    /// Writes `MISTPARM`, a little-endian `u32` header length, a JSON header
    /// (config, names, shapes), then every parameter as little-endian `f64`.
    pub fn write(&self, mut w: impl Write) -> Result<()> {
        let header = ParamsHeader {
            config: self.config.clone(),
            names: self.store.names().to_vec(),
            shapes: self.store.tensors().iter().map(|t| t.shape().to_vec()).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(PARAMS_MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for t in self.store.tensors() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        let bad = |m: &str| HarnessError::Params(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
        if &magic != PARAMS_MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(|_| bad("missing header length"))?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
        let header: ParamsHeader = serde_json::from_slice(&json)?;
        let mut model = Self::init(&header.config)?;
        if header.names != model.store.names() {
            return Err(bad("parameter names do not match the configured architecture"));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut tensors = Vec::with_capacity(header.shapes.len());
        for shape in &header.shapes {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            if data.len() != n {
                return Err(bad("payload shorter than declared shapes"));
            }
            tensors.push(Tensor::new(shape.clone(), data)?);
        }
        if payload.len() != 8 * tensors.iter().map(Tensor::numel).sum::<usize>() {
            return Err(bad("payload length does not match declared shapes"));
        }
        model.store.set_all(tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsHeader {
    config: TrainConfig,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use mist_core::features::generate_synthetic;

    #[test]
    fn every_kind_scores_a_sample() {
        for model in ModelKind::ALL {
            let cfg = TrainConfig { model, ..TrainConfig::tiny() };
            let m = Model::init(&cfg).unwrap();
            let s = generate_synthetic(&cfg.synth(), 1).unwrap();
            let mut g = Graph::new();
            let f = m.forward(&mut g, &s, &mut Noise::Eval, 1.0).unwrap();
            assert_eq!(g.shape(f.scores), (1, cfg.answers), "{model:?}");
            assert_eq!(f.trace.is_some(), model == ModelKind::Mist);
        }
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let m = Model::init(&TrainConfig::tiny()).unwrap();
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        let back = Model::read(&buf[..]).unwrap();
        assert_eq!(back.store, m.store);
        assert_eq!(back.config, m.config);
        assert!(Model::read(&buf[..buf.len() - 3]).is_err());
    }
}
