use std::path::Path;

use kneefuse::cohort::check_horizon;
use kneefuse::io::canonical_json;
use kneefuse::models::{ArchKind, ArchSpec};
use kneefuse::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Everything a training run depends on. Paths are inputs only, so reports
/// written to different output directories stay byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Directory written by `synth` (cohort.csv, synth.json, volumes/).
    pub data: String,
    pub horizon: u32,
    pub holdout_site: String,
    pub folds: usize,
    pub scale: f64,
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub split_seed: u64,
    pub eval_seed: u64,
    pub bootstrap_iters: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: String::new(),
            horizon: 24,
            holdout_site: "D".into(),
            folds: 5,
            scale: 0.1,
            arch: ArchSpec::desk(ArchKind::MR1),
            train: TrainConfig::default(),
            split_seed: 0,
            eval_seed: 0,
            bootstrap_iters: 1000,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::Contract(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        check_horizon(self.horizon)?;
        self.arch.validate()?;
        self.train.validate()?;
        if self.data.is_empty() {
            return Err(CliError::Contract("run config needs a data directory".into()));
        }
        if self.folds < 2 {
            return Err(CliError::Contract("folds must be >= 2".into()));
        }
        Ok(())
    }
}

/// SHA-256 of the canonical JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String, CliError> {
    let json = canonical_json(value)?;
    Ok(hex::encode(Sha256::digest(json.as_bytes())))
}
