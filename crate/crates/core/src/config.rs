//! The experiment configuration: one JSON document wiring dataset paths,
//! model, loss, training, semi-supervised and GAN sections together. Every
//! artifact a run emits embeds this config's hash.

use crate::augment::AugmentationPipeline;
use crate::error::Result;
use crate::gan::GanLossWeights;
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::train::{SslConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub dataset_dir: PathBuf,
    pub side: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset_dir: PathBuf::from("dataset"),
            side: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct OversampleConfig {
    pub enabled: bool,
    pub target_classes: Vec<u8>,
    pub factor: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub ssl: SslConfig,
    pub gan: GanLossWeights,
    /// Absent means the default 15-transform pipeline.
    pub augmentation: Option<AugmentationPipeline>,
    pub oversample: OversampleConfig,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_str(s)?;
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.ssl.validate()?;
        self.gan.validate()?;
        self.model.encoder.validate()?;
        Ok(())
    }

    /// The top-level seed flows into sections that left theirs at 0.
    pub fn normalize(&mut self) {
        if self.train.seed == 0 {
            self.train.seed = self.seed;
        }
        if self.ssl.seed == 0 {
            self.ssl.seed = self.seed;
        }
    }

    /// Stable fingerprint of the canonical JSON form.
    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a64(self.to_json().as_bytes()))
    }

    /// Fingerprint of the model section alone; checkpoints carry it so
    /// later commands can verify architectural compatibility without
    /// freezing training hyperparameters.
    pub fn model_hash(&self) -> String {
        let json = serde_json::to_string(&self.model).expect("model section serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }

    pub fn pipeline(&self) -> AugmentationPipeline {
        self.augmentation
            .clone()
            .unwrap_or_else(crate::augment::build_default_pipeline)
    }
}

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
