//! Mini-batch training loops for both stages.

use std::collections::BTreeMap;

use clozecheck_tensor::{cosine_anneal, AdamW, AdamWConfig, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{EditLabel, LabelSeq};
use crate::error::Result;
use crate::eval::MetricsReport;
use crate::fusion::MacModel;
use crate::glyphgen::GlyphImage;
use crate::nn::Graph;
use crate::ocr::{cer, OcrModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Leading epochs that see only the warm-up subset (see `train_mac`).
    #[serde(default)]
    pub curriculum_epochs: usize,
}

impl TrainConfig {
    pub fn pretrain_defaults() -> Self {
        Self {
            lr: 1e-3,
            epochs: 15,
            batch: 8,
            weight_decay: 1e-4,
            seed: 42,
            curriculum_epochs: 0,
        }
    }

    pub fn mac_defaults() -> Self {
        Self {
            lr: 1e-4,
            epochs: 14,
            curriculum_epochs: 4,
            ..Self::pretrain_defaults()
        }
    }

    fn optimizer(&self, store: &ParamStore) -> AdamW {
        AdamW::new(
            store,
            AdamWConfig {
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
        )
    }
}

/// Runs `epochs × batches` optimiser steps with a cosine schedule. `batch_loss`
/// builds the summed loss for one batch of indices on the given graph and
/// returns its value; `on_epoch` sees the mean loss of each finished epoch.
/// The first `cfg.curriculum_epochs` epochs draw only from `warmup` when it
/// is non-empty.
pub(crate) fn fit<F, E>(
    store: &mut ParamStore,
    n: usize,
    warmup: &[usize],
    cfg: &TrainConfig,
    mut batch_loss: F,
    mut on_epoch: E,
) -> Result<()>
where
    F: FnMut(&mut Graph, &[usize]) -> Result<clozecheck_tensor::Var>,
    E: FnMut(usize, f64, &ParamStore) -> Result<()>,
{
    let batch = cfg.batch.max(1);
    let all: Vec<usize> = (0..n).collect();
    let pool = |epoch: usize| if epoch < cfg.curriculum_epochs && !warmup.is_empty() { warmup } else { &all[..] };
    let total = (0..cfg.epochs).map(|e| pool(e).len().div_ceil(batch)).sum::<usize>().max(1);
    let mut opt = cfg.optimizer(store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order = pool(epoch).to_vec();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(batch) {
            let dropout_seed = cfg.seed ^ (step as u64).wrapping_mul(0x2545_f491_4f6c_dd1d);
            let mut g = Graph::new(store, true, dropout_seed);
            let loss = batch_loss(&mut g, chunk)?;
            let (tape, stats) = g.into_parts();
            sum += tape.value(loss).item() * chunk.len() as f64;
            let grads = tape.backward(loss);
            store.zero_grad();
            grads.accumulate(&tape, store);
            opt.step(store, cosine_anneal(step, total, cfg.lr))?;
            for s in &stats {
                s.apply(store, crate::nn::BatchNorm::MOMENTUM);
            }
            step += 1;
        }
        on_epoch(epoch, sum / order.len().max(1) as f64, store)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcrEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_cer: Option<f64>,
}

/// Mean CER of `model` over `(image, content)` pairs.
pub fn mean_cer(model: &OcrModel, data: &[(&GlyphImage, &str)]) -> Result<f64> {
    let mut total = 0.0;
    for (img, text) in data {
        total += cer(&model.recognize(img)?, text);
    }
    Ok(total / data.len().max(1) as f64)
}

/// CTC training. The loss of a batch is the mean over its images.
pub fn train_ocr(
    model: &mut OcrModel,
    train: &[(&GlyphImage, &str)],
    dev: &[(&GlyphImage, &str)],
    cfg: &TrainConfig,
) -> Result<Vec<OcrEpoch>> {
    let mut log = Vec::new();
    let mut store = std::mem::take(&mut model.store);
    let shape = model.clone();
    let result = fit(
        &mut store,
        train.len(),
        &[],
        cfg,
        |g, idx| {
            let items: Vec<(&GlyphImage, &str)> = idx.iter().map(|&i| train[i]).collect();
            shape.batch_loss(g, &items, 1.0 / idx.len() as f64)
        },
        |epoch, train_loss, store| {
            let dev_cer = if dev.is_empty() {
                None
            } else {
                let m = OcrModel {
                    store: store.clone(),
                    ..shape.clone()
                };
                Some(mean_cer(&m, dev)?)
            };
            log::info!("pretrain epoch {epoch}: loss {train_loss:.4} dev cer {dev_cer:?}");
            log.push(OcrEpoch {
                epoch,
                train_loss,
                dev_cer,
            });
            Ok(())
        },
    );
    model.store = store;
    result.map(|_| log)
}

/// One MAC training or evaluation item with its backbone features precomputed.
#[derive(Clone, Debug)]
pub struct MacItem {
    pub features: Tensor,
    pub valid_blocks: usize,
    pub answer: String,
    pub labels: LabelSeq,
}

/// Runs the frozen backbone once per distinct image. `images[i]` pairs with
/// `samples[i]`; `key` identifies the image so shared images are encoded once.
pub fn mac_items<'a>(
    model: &MacModel,
    samples: impl IntoIterator<Item = (&'a str, &'a GlyphImage, &'a str, &'a LabelSeq)>,
) -> Result<Vec<MacItem>> {
    let mut cache: BTreeMap<&str, Tensor> = BTreeMap::new();
    let mut out = Vec::new();
    for (key, img, answer, labels) in samples {
        let features = match cache.get(key) {
            Some(z) => z.clone(),
            None => {
                let z = model.image_features(img)?;
                cache.insert(key, z.clone());
                z
            }
        };
        out.push(MacItem {
            features,
            valid_blocks: model.valid_blocks(img),
            answer: answer.to_string(),
            labels: labels.clone(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_seq_f1: Option<f64>,
    pub dev_accuracy: Option<f64>,
}

/// Predicted label sequences for `items`.
pub fn mac_predict(model: &MacModel, items: &[MacItem]) -> Result<Vec<LabelSeq>> {
    items
        .iter()
        .map(|it| Ok(model.predict_features(&it.features, it.valid_blocks, &it.answer)?.labels))
        .collect()
}

/// Span F1 and binary accuracy of `model` on `items`.
pub fn mac_scores(model: &MacModel, items: &[MacItem]) -> Result<(f64, f64)> {
    let pred = mac_predict(model, items)?;
    let gold: Vec<LabelSeq> = items.iter().map(|it| it.labels.clone()).collect();
    let r = MetricsReport::from_labels("dev", &pred, &gold, None)?;
    Ok((r.seq_f1, r.bin_accuracy))
}

fn same_length(labels: &LabelSeq) -> bool {
    labels
        .labels()
        .iter()
        .all(|l| matches!(l, EditLabel::O | EditLabel::BSub | EditLabel::ISub))
}

/// Second-stage training of everything but the (frozen) backbone.
///
/// The first `cfg.curriculum_epochs` epochs use only pairs whose answer has
/// the written length (right answers and substitutions). On the full mix the
/// model first settles on comparing lengths, which already explains the
/// insertions and deletions, and then seldom learns to compare characters.
pub fn train_mac(model: &mut MacModel, train: &[MacItem], dev: &[MacItem], cfg: &TrainConfig) -> Result<Vec<MacEpoch>> {
    let mut log = Vec::new();
    let mut store = std::mem::take(&mut model.store);
    let shape = model.clone();
    let warmup: Vec<usize> = (0..train.len()).filter(|&i| same_length(&train[i].labels)).collect();
    let result = fit(
        &mut store,
        train.len(),
        &warmup,
        cfg,
        |g, idx| {
            let scale = 1.0 / idx.len() as f64;
            let mut total = None;
            for &i in idx {
                let it = &train[i];
                let l = shape.loss(g, &it.features, it.valid_blocks, &it.answer, &it.labels, scale)?;
                total = Some(match total {
                    None => l,
                    Some(t) => g.tape.add(t, l)?,
                });
            }
            Ok(total.expect("non-empty batch"))
        },
        |epoch, train_loss, store| {
            let (dev_seq_f1, dev_accuracy) = if dev.is_empty() {
                (None, None)
            } else {
                let mut m = shape.clone();
                m.store = store.clone();
                let (f1, acc) = mac_scores(&m, dev)?;
                (Some(f1), Some(acc))
            };
            log::info!("mac epoch {epoch}: loss {train_loss:.4} dev f1 {dev_seq_f1:?} acc {dev_accuracy:?}");
            log.push(MacEpoch {
                epoch,
                train_loss,
                dev_seq_f1,
                dev_accuracy,
            });
            Ok(())
        },
    );
    model.store = store;
    result.map(|_| log)
}
