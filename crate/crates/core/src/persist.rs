//! Model checkpoints. Each file carries a JSON header with the model shape,
//! the vocabulary, the hash of the run configuration and the training RNG
//! position, followed by the named tensors.

use std::path::Path;

use clozecheck_tensor::Checkpoint;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::{MacConfig, MacModel};
use crate::ocr::{BackboneConfig, Geometry, OcrModel};
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    /// `"ocr"` or `"mac"`.
    pub kind: String,
    pub config_hash: String,
    pub geometry: Geometry,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub mac: Option<MacConfig>,
    pub vocab: String,
    /// Training seed and optimiser steps taken; every random draw in training
    /// is a function of these two.
    pub seed: u64,
    pub steps: usize,
    /// Whether the backbone came from a pretrained recogniser (MAC only).
    #[serde(default)]
    pub pretrained_backbone: bool,
}

fn corrupt(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::CheckpointCorrupt(format!("{}: {msg}", path.display()))
}

fn read(path: &Path, kind: &str) -> Result<(Header, Checkpoint)> {
    let ck = Checkpoint::load(path).map_err(|e| corrupt(path, e))?;
    let header: Header = serde_json::from_value(ck.header.clone()).map_err(|e| corrupt(path, e))?;
    if header.kind != kind {
        return Err(corrupt(path, format!("expected a {kind} checkpoint, found {}", header.kind)));
    }
    Ok((header, ck))
}

impl Header {
    fn vocabulary(&self, path: &Path) -> Result<Vocabulary> {
        let chars: Vec<char> = self.vocab.chars().collect();
        Vocabulary::new(chars).map_err(|e| corrupt(path, e))
    }

    /// Refuses to run a model on data of another geometry.
    pub fn expect_geometry(&self, geometry: &Geometry) -> Result<()> {
        if self.geometry != *geometry {
            return Err(Error::GeometryMismatch(format!(
                "checkpoint geometry {:?}, run uses {:?}",
                self.geometry, geometry
            )));
        }
        Ok(())
    }
}

fn vocab_string(v: &Vocabulary) -> String {
    v.chars().iter().collect()
}

pub fn save_ocr(path: &Path, model: &OcrModel, cfg: &RunConfig, steps: usize) -> Result<()> {
    let header = Header {
        kind: "ocr".into(),
        config_hash: cfg.hash(),
        geometry: model.backbone.geometry,
        backbone: model.backbone.config.clone(),
        mac: None,
        vocab: vocab_string(&model.vocab),
        seed: cfg.pretrain().seed,
        steps,
        pretrained_backbone: false,
    };
    Checkpoint::new(serde_json::to_value(&header)?, model.store.named_tensors()).save(path)?;
    Ok(())
}

pub fn load_ocr(path: &Path) -> Result<(OcrModel, Header)> {
    let (h, ck) = read(path, "ocr")?;
    let vocab = h.vocabulary(path)?;
    let mut model = OcrModel::new(&vocab, h.geometry, h.backbone.clone(), 0)?;
    model.store.load_named(&ck.tensors).map_err(|e| corrupt(path, e))?;
    Ok((model, h))
}

pub fn save_mac(path: &Path, model: &MacModel, cfg: &RunConfig, steps: usize, pretrained: bool) -> Result<()> {
    let header = Header {
        kind: "mac".into(),
        config_hash: cfg.hash(),
        geometry: model.geometry(),
        backbone: model.backbone.config.clone(),
        mac: Some(model.config),
        vocab: vocab_string(&model.vocab),
        seed: cfg.mac_train().seed,
        steps,
        pretrained_backbone: pretrained,
    };
    let mut tensors = model.backbone_store.named_tensors();
    tensors.extend(model.store.named_tensors());
    Checkpoint::new(serde_json::to_value(&header)?, tensors).save(path)?;
    Ok(())
}

pub fn load_mac(path: &Path) -> Result<(MacModel, Header)> {
    let (h, ck) = read(path, "mac")?;
    let vocab = h.vocabulary(path)?;
    let mac = h.mac.ok_or_else(|| corrupt(path, "missing model config"))?;
    let mut model = MacModel::new(&vocab, h.geometry, h.backbone.clone(), mac, 0)?;
    model.load_backbone(&ck.tensors).map_err(|e| corrupt(path, e))?;
    model.store.load_named(&ck.tensors).map_err(|e| corrupt(path, e))?;
    Ok((model, h))
}

/// The header of any checkpoint, without building the model.
pub fn peek(path: &Path) -> Result<Value> {
    Ok(Checkpoint::load(path).map_err(|e| corrupt(path, e))?.header)
}
