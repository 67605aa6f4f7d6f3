use std::path::{Path, PathBuf};

use radseq::inference::BeamConfig;
use radseq::model::ModelConfig;
use radseq::trainer::TrainConfig;
use serde::Deserialize;

use crate::error::CliError;

pub const CHECKPOINT_ENV: &str = "RADSEQ_CHECKPOINT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: PathBuf,
    pub vocab: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
}

/// Contents of a run configuration file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Model scale preset name.
    pub preset: String,
    /// Full architecture; overrides `preset` when present.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataPaths,
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub metrics: Option<PathBuf>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub dtype: Dtype,
    #[serde(default)]
    pub beam: BeamConfig,
}

fn default_seed() -> u64 {
    1
}

impl RunConfig {
    /// Reads a config and resolves its paths against the file's directory.
    /// `RADSEQ_CHECKPOINT` replaces the checkpoint path when set.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data.train);
        resolve(&mut cfg.data.vocab);
        if let Some(t) = cfg.data.test.as_mut() {
            resolve(t);
        }
        resolve(&mut cfg.checkpoint);
        if let Some(m) = cfg.metrics.as_mut() {
            resolve(m);
        }
        if let Some(env) = std::env::var_os(CHECKPOINT_ENV) {
            cfg.checkpoint = PathBuf::from(env);
        }
        Ok(cfg)
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        match &self.model {
            Some(m) => Ok(m.clone()),
            None => ModelConfig::preset(&self.preset)
                .ok_or_else(|| CliError::Usage(format!("unknown preset {:?}", self.preset))),
        }
    }
}
