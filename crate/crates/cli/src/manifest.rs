use std::path::{Path, PathBuf};

use mist_harness::TrainConfig;
use serde::{Deserialize, Serialize};

/// Written next to every artifact as `manifest.<command>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub code_version: String,
    /// The fully resolved configuration, so a run can be repeated from the
    /// manifest alone.
    pub config: Option<TrainConfig>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// `MIST_THREADS` at run time; results do not depend on it.
    pub threads: Option<String>,
    pub started_at: String,
    pub finished_at: String,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().collect(),
            code_version: concat!("mist ", env!("CARGO_PKG_VERSION")).to_string(),
            config: None,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            threads: std::env::var("MIST_THREADS").ok(),
            started_at: now(),
            finished_at: String::new(),
        }
    }

    pub fn with_config(mut self, cfg: &TrainConfig) -> Self {
        self.seed = Some(cfg.seed);
        self.config = Some(cfg.clone());
        self
    }

    pub fn path_in(&self, dir: &Path) -> PathBuf {
        dir.join(format!("manifest.{}.json", self.command))
    }

    pub fn finish(mut self, dir: &Path) -> std::io::Result<PathBuf> {
        self.finished_at = now();
        let path = self.path_in(dir);
        let json = serde_json::to_string_pretty(&self).map_err(std::io::Error::other)?;
        std::fs::write(&path, json + "\n")?;
        Ok(path)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
