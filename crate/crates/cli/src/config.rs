use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voicepd::data::SynthConfig;
use voicepd::model::ModelConfig;
use voicepd::survey::TruthMapping;
use voicepd::train::TrainConfig;

use crate::failure::Failure;

/// Everything a run depends on. A config file holds one JSON document of
/// this shape; command-line flags override it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub folds: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub survey: TruthMapping,
    /// Conv weight file for the pretrained configurations.
    pub pretrained: Option<PathBuf>,
    /// Use a Kaiming-initialized conv stack (seeded) in place of a weight file.
    pub random_conv: bool,
    /// Directory of background-noise WAV files.
    pub noise_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            folds: 5,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            survey: TruthMapping::default(),
            pretrained: None,
            random_conv: false,
            noise_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Validation(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("config {}: {e}", path.display())))
    }

    /// Copies run-wide settings into the nested configurations and checks
    /// them.
    pub fn finish(mut self) -> Result<Self, Failure> {
        self.train.seed = self.seed;
        self.train.threads = self.threads;
        self.synth.seed = self.seed;
        if self.threads == 0 {
            return Err(Failure::Validation("--threads must be at least 1".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        Ok(self)
    }

    pub fn stamp(&self) -> String {
        voicepd::provenance::stamp(self.seed, self)
    }
}
