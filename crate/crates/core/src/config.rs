//! Run configuration: defaults, TOML/JSON files, `key=value` overrides and a
//! stable hash embedded in checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::error::{io_err, Error, Result};
use crate::fusion::MacConfig;
use crate::ocr::{BackboneConfig, Geometry};
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub lr_pretrain: f64,
    pub epochs_pretrain: usize,
    pub lr_mac: f64,
    pub epochs_mac: usize,
    /// Leading MAC epochs on same-length pairs only.
    pub curriculum_epochs_mac: usize,
    pub batch: usize,
    pub weight_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let p = TrainConfig::pretrain_defaults();
        let m = TrainConfig::mac_defaults();
        Self {
            lr_pretrain: p.lr,
            epochs_pretrain: p.epochs,
            lr_mac: m.lr,
            epochs_mac: m.epochs,
            curriculum_epochs_mac: m.curriculum_epochs,
            batch: p.batch,
            weight_decay: p.weight_decay,
        }
    }
}

/// A named slice of the training images, for data-source ablations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardSpec {
    pub name: String,
    /// Relative share of the training images.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Training images; each yields one positive plus its augmented negatives.
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Share of test images paired with a wrong answer.
    pub test_negative_ratio: f64,
    /// Seed of the glyph bank, i.e. the "script" itself.
    pub glyph_seed: u64,
    pub synth: SynthConfig,
    pub shards: Vec<ShardSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_dev: 200,
            n_test: 400,
            test_negative_ratio: 100.0 / 673.0,
            glyph_seed: 1,
            synth: SynthConfig::default(),
            shards: vec![
                ShardSpec {
                    name: "main".into(),
                    weight: 0.6,
                },
                ShardSpec {
                    name: "extra".into(),
                    weight: 0.4,
                },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub geometry: Geometry,
    pub backbone: BackboneConfig,
    pub mac: MacConfig,
    pub train: TrainSection,
    pub augment: AugmentConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            geometry: Geometry::default(),
            backbone: BackboneConfig::default(),
            mac: MacConfig::default(),
            train: TrainSection::default(),
            augment: AugmentConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a `.toml` or `.json` file; missing fields take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
            _ => Ok(serde_json::from_str(&text)?),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?,
            _ => serde_json::to_string_pretty(self)? + "\n",
        };
        std::fs::write(path, text).map_err(io_err(path))
    }

    /// Applies `a.b.c=value` overrides. Values parse as JSON when they can
    /// and are taken as strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut v;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
            }
            *slot = value;
        }
        serde_json::from_value(v).map_err(|e| Error::Config(format!("override: {e}")))
    }

    pub fn check(&self) -> Result<()> {
        self.geometry.check()?;
        if self.data.shards.is_empty() || self.data.shards.iter().any(|s| s.weight <= 0.0) {
            return Err(Error::Config("need at least one shard, all with positive weight".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn pretrain(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr_pretrain,
            epochs: self.train.epochs_pretrain,
            batch: self.train.batch,
            weight_decay: self.train.weight_decay,
            seed: self.seed,
            curriculum_epochs: 0,
        }
    }

    pub fn mac_train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr_mac,
            epochs: self.train.epochs_mac,
            batch: self.train.batch,
            weight_decay: self.train.weight_decay,
            seed: self.seed ^ 0x6d61_6300,
            curriculum_epochs: self.train.curriculum_epochs_mac,
        }
    }
}
