//! End-to-end commands: dataset generation, both training stages,
//! evaluation, single-sample correction, attention export and ablations.
//!
//! A data directory holds `vocab.txt`, `confusion.txt`, `images/` and the
//! `train`, `dev` and `test` manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::{derive_labels_str, LabelSeq};
use crate::augment::augment;
use crate::config::RunConfig;
use crate::dataset::{validate_manifest, write_manifest, Dataset, Sample};
use crate::error::{io_err, Error, Result};
use crate::eval::{ocr_pipeline_correct, report_table, MetricsReport};
use crate::fusion::MacModel;
use crate::glyphgen::{pad_to_width, GlyphBank, GlyphImage};
use crate::ocr::{cer, OcrModel};
use crate::persist::{load_mac, load_ocr, save_mac, save_ocr};
use crate::synth::{render_lines, test_samples, Line};
use crate::train::{mac_items, train_mac, train_ocr, MacEpoch, MacItem, OcrEpoch};
use crate::vocab::{ConfusionSet, Vocabulary};

pub const TRAIN: &str = "train.jsonl";
pub const DEV: &str = "dev.jsonl";
pub const TEST: &str = "test.jsonl";

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSummary {
    pub train_images: usize,
    pub train_samples: usize,
    pub skipped_negatives: usize,
    pub dev_samples: usize,
    pub test_samples: usize,
}

/// Index of the shard that training image `i` of `n` falls into.
fn shard_of(cfg: &RunConfig, i: usize, n: usize) -> &str {
    let shards = &cfg.data.shards;
    let total: f64 = shards.iter().map(|s| s.weight).sum();
    let pos = (i as f64 + 0.5) / n as f64 * total;
    let mut acc = 0.0;
    for s in shards {
        acc += s.weight;
        if pos < acc {
            return &s.name;
        }
    }
    &shards[shards.len() - 1].name
}

/// Renders every split, augments the training split only and writes the
/// manifests. Splits are cut at the image level before augmentation.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<GenSummary> {
    cfg.check()?;
    let vocab = Vocabulary::synthetic();
    let confusion = ConfusionSet::clustered(&vocab);
    let bank = GlyphBank::synthetic(&vocab, cfg.geometry.img_height, cfg.data.glyph_seed);
    let d = &cfg.data;
    let lines = render_lines(d.n_train + d.n_dev + d.n_test, &bank, &confusion, &cfg.geometry, &d.synth, cfg.seed)?;
    let (train, rest) = lines.split_at(d.n_train);
    let (dev, test) = rest.split_at(d.n_dev);

    write(&out.join("vocab.txt"), &vocab.to_file_string())?;
    write(&out.join("confusion.txt"), &confusion.to_file_string())?;
    let save_images = |split: &str, lines: &[Line]| -> Result<Vec<String>> {
        lines
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let rel = format!("images/{split}{i:05}.pgm");
                let path = out.join(&rel);
                if let Some(dir) = path.parent() {
                    fs::create_dir_all(dir).map_err(io_err(dir))?;
                }
                l.image.write_pgm(&path)?;
                Ok(rel)
            })
            .collect()
    };

    let paths = save_images("train", train)?;
    let originals: Vec<Sample> = train
        .iter()
        .zip(&paths)
        .enumerate()
        .map(|(i, (l, p))| {
            Sample::positive(
                format!("train{i:05}"),
                p.clone(),
                l.content.clone(),
                l.image.valid_width,
                shard_of(cfg, i, train.len()).to_string(),
            )
        })
        .collect();
    let aug = augment(&originals, &cfg.augment, &confusion, &vocab);

    let dev_paths = save_images("dev", dev)?;
    let mut dev_samples = test_samples(dev, &dev_paths, d.test_negative_ratio, &confusion, &vocab, cfg.seed ^ 0xde);
    for s in &mut dev_samples {
        s.id = s.id.replacen("test", "dev", 1);
        s.shard = "dev".into();
    }
    let test_paths = save_images("test", test)?;
    let test_set = test_samples(test, &test_paths, d.test_negative_ratio, &confusion, &vocab, cfg.seed ^ 0x7e57);

    for (name, samples) in [(TRAIN, &aug.samples), (DEV, &dev_samples), (TEST, &test_set)] {
        let path = out.join(name);
        write_manifest(&path, samples)?;
        validate_manifest(&path, samples, &vocab, cfg.geometry.max_width)?;
    }
    cfg.save(&out.join("config.json"))?;
    Ok(GenSummary {
        train_images: train.len(),
        train_samples: aug.samples.len(),
        skipped_negatives: aug.skipped,
        dev_samples: dev_samples.len(),
        test_samples: test_set.len(),
    })
}

fn load_split(data: &Path, name: &str) -> Result<Dataset> {
    Dataset::load(&data.join(name))
}

fn vocab_of(data: &Path) -> Result<Vocabulary> {
    Vocabulary::from_file(&data.join("vocab.txt"))
}

fn steps(n: usize, batch: usize, epochs: usize) -> usize {
    n.div_ceil(batch.max(1)) * epochs
}

/// Trains the recogniser on the distinct training images and writes the
/// checkpoint plus `<checkpoint>.metrics.json`.
pub fn pretrain(cfg: &RunConfig, data: &Path, checkpoint: &Path) -> Result<Vec<OcrEpoch>> {
    let vocab = vocab_of(data)?;
    let train = load_split(data, TRAIN)?;
    let dev = load_split(data, DEV)?;
    let mut model = OcrModel::new(&vocab, cfg.geometry, cfg.backbone.clone(), cfg.seed)?;
    let train_imgs = train.unique_images();
    let dev_imgs = dev.unique_images();
    let tc = cfg.pretrain();
    let log = train_ocr(&mut model, &train_imgs, &dev_imgs, &tc)?;
    save_ocr(checkpoint, &model, cfg, steps(train_imgs.len(), tc.batch, tc.epochs))?;
    write_json(&metrics_path(checkpoint), &log)?;
    Ok(log)
}

fn metrics_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".metrics.json");
    PathBuf::from(s)
}

fn items(model: &MacModel, ds: &Dataset) -> Result<Vec<MacItem>> {
    mac_items(
        model,
        ds.samples
            .iter()
            .map(|s| (s.image_path.as_str(), ds.image(s), s.answer.as_str(), &s.labels)),
    )
}

/// A MAC model whose backbone and character embeddings start from `ocr`
/// (random when `None`).
pub fn build_mac(cfg: &RunConfig, vocab: &Vocabulary, ocr: Option<&Path>) -> Result<MacModel> {
    let mut model = MacModel::new(vocab, cfg.geometry, cfg.backbone.clone(), cfg.mac, cfg.seed)?;
    if let Some(path) = ocr {
        let (ocr, header) = load_ocr(path)?;
        header.expect_geometry(&cfg.geometry)?;
        if ocr.backbone.config != cfg.backbone {
            return Err(Error::Config(format!("{}: backbone differs from the run config", path.display())));
        }
        model.load_backbone(&ocr.store.named_tensors())?;
        model.seed_char_embeddings(ocr.store.value(ocr.head.w))?;
    }
    Ok(model)
}

/// Second stage. `ocr == None` trains on a random frozen backbone, the
/// no-pretraining ablation. Shards in `exclude` are left out.
pub fn train(cfg: &RunConfig, data: &Path, ocr: Option<&Path>, checkpoint: &Path, exclude: &[String]) -> Result<Vec<MacEpoch>> {
    let vocab = vocab_of(data)?;
    let mut model = build_mac(cfg, &vocab, ocr)?;
    let train = load_split(data, TRAIN)?.without_shards(exclude);
    if train.is_empty() {
        return Err(Error::Config("no training samples left after shard exclusion".into()));
    }
    let dev = load_split(data, DEV)?;
    let train_items = items(&model, &train)?;
    let dev_items = items(&model, &dev)?;
    let before = model.backbone_store.checksum();
    let tc = cfg.mac_train();
    let log = train_mac(&mut model, &train_items, &dev_items, &tc)?;
    debug_assert_eq!(before, model.backbone_store.checksum());
    save_mac(checkpoint, &model, cfg, steps(train_items.len(), tc.batch, tc.epochs), ocr.is_some())?;
    write_json(&metrics_path(checkpoint), &log)?;
    Ok(log)
}

/// Per-sample predictions kept next to the reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub content: String,
    pub answer: String,
    pub gold_y: u8,
    pub ocr_text: String,
    pub baseline_y: u8,
    pub mac_y: u8,
    pub mac_labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub baseline: MetricsReport,
    pub mac: MetricsReport,
    pub rows: Vec<EvalRow>,
}

/// The recognise-then-compare baseline on one split: labels come from
/// aligning the recognised text with the answer.
pub fn baseline_report(ocr: &OcrModel, ds: &Dataset) -> Result<(MetricsReport, Vec<String>)> {
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    let mut texts = Vec::new();
    let mut cer_sum = 0.0;
    for s in &ds.samples {
        let text = ocr.recognize(ds.image(s))?;
        cer_sum += cer(&text, &s.content);
        let labels = derive_labels_str(&text, &s.answer);
        debug_assert_eq!(crate::alignment::reduce_binary(&labels), ocr_pipeline_correct(&text, &s.answer, &[]));
        pred.push(labels);
        gold.push(s.labels.clone());
        texts.push(text);
    }
    let cer = cer_sum / ds.len().max(1) as f64;
    Ok((MetricsReport::from_labels("ocr-pipeline", &pred, &gold, Some(cer))?, texts))
}

pub fn mac_report(model: &MacModel, ds: &Dataset) -> Result<(MetricsReport, Vec<LabelSeq>)> {
    let it = items(model, ds)?;
    let pred = crate::train::mac_predict(model, &it)?;
    let gold: Vec<LabelSeq> = ds.samples.iter().map(|s| s.labels.clone()).collect();
    Ok((MetricsReport::from_labels("mac", &pred, &gold, None)?, pred))
}

/// Scores the baseline and MAC on the test split; writes `report.json`,
/// `report.txt` and `predictions.jsonl` into `out`.
pub fn eval(cfg: &RunConfig, data: &Path, ocr: &Path, mac: &Path, out: &Path) -> Result<EvalOutcome> {
    let (ocr, oh) = load_ocr(ocr)?;
    oh.expect_geometry(&cfg.geometry)?;
    let (model, mh) = load_mac(mac)?;
    mh.expect_geometry(&cfg.geometry)?;
    let test = load_split(data, TEST)?;
    let (baseline, texts) = baseline_report(&ocr, &test)?;
    let (mac_r, pred) = mac_report(&model, &test)?;
    let rows = test
        .samples
        .iter()
        .zip(texts)
        .zip(&pred)
        .map(|((s, text), p)| EvalRow {
            id: s.id.clone(),
            content: s.content.clone(),
            answer: s.answer.clone(),
            gold_y: s.y,
            baseline_y: ocr_pipeline_correct(&text, &s.answer, &[]),
            ocr_text: text,
            mac_y: crate::alignment::reduce_binary(p),
            mac_labels: p.to_strings(),
        })
        .collect();
    let outcome = EvalOutcome {
        baseline,
        mac: mac_r,
        rows,
    };
    write_reports(out, &[outcome.baseline.clone(), outcome.mac.clone()])?;
    let mut lines = String::new();
    for r in &outcome.rows {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    write(&out.join("predictions.jsonl"), &lines)?;
    Ok(outcome)
}

pub fn write_reports(out: &Path, reports: &[MetricsReport]) -> Result<()> {
    write_json(&out.join("report.json"), &reports)?;
    write(&out.join("report.txt"), &report_table(reports))
}

/// Answer to `correct`: the edit labels for one image/answer pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub answer: String,
    /// One label per answer position, `<BLK>` first.
    pub labels: Vec<String>,
    pub y: u8,
    pub verdict: String,
    /// Probability of the chosen label at each position.
    pub confidence: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ocr_text: Option<String>,
}

/// Loads a line image for inference. Narrow images are padded; a full-width
/// image counts as valid up to its last inked column.
pub fn prepare_image(img: &GlyphImage, geometry: &crate::ocr::Geometry) -> Result<GlyphImage> {
    if img.height != geometry.img_height {
        return Err(Error::GeometryMismatch(format!(
            "image height {} but the model expects {}",
            img.height, geometry.img_height
        )));
    }
    if img.width < geometry.max_width {
        return pad_to_width(img, geometry.max_width, geometry.block_width);
    }
    let mut out = pad_to_width(img, geometry.max_width, geometry.block_width)?;
    let mask = img.ink_mask();
    let last = (0..img.width).rev().find(|&x| (0..img.height).any(|y| mask[y * img.width + x]));
    out.valid_width = last.map_or(1, |x| (x + 2).min(img.width));
    Ok(out)
}

pub fn correct(mac: &Path, ocr: Option<&Path>, image: &Path, answer: &str) -> Result<Correction> {
    let (model, _) = load_mac(mac)?;
    let img = prepare_image(&GlyphImage::read_pgm(image)?, &model.geometry())?;
    let p = model.predict(&img, answer)?;
    let confidence = p
        .labels
        .labels()
        .iter()
        .zip(&p.probs)
        .map(|(l, row)| row[l.index()])
        .collect();
    let ocr_text = match ocr {
        Some(path) => Some(load_ocr(path)?.0.recognize(&img)?),
        None => None,
    };
    Ok(Correction {
        answer: answer.to_string(),
        labels: p.labels.to_strings(),
        y: p.binary,
        verdict: if p.binary == 0 { "correct" } else { "wrong" }.into(),
        confidence,
        ocr_text,
    })
}

/// Writes `attention.csv` (`layer,head,token_index,block_index,weight`) with
/// the cross-attention of every fusion block, and one PGM heatmap per layer
/// and head (rows are answer positions, columns image blocks, darker is
/// heavier).
pub fn viz_attn(mac: &Path, image: &Path, answer: &str, out: &Path) -> Result<Vec<PathBuf>> {
    let (model, _) = load_mac(mac)?;
    let img = prepare_image(&GlyphImage::read_pgm(image)?, &model.geometry())?;
    let (f, _) = model.inspect(&img, answer)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut csv = String::from("layer,head,token_index,block_index,weight\n");
    let mut written = Vec::new();
    const CELL: usize = 4;
    for (layer, heads) in f.cross_attention.iter().enumerate() {
        for (head, w) in heads.iter().enumerate() {
            let (rows, cols) = w.dims2();
            for t in 0..f.valid_tokens.min(rows) {
                for b in 0..cols {
                    csv.push_str(&format!("{layer},{head},{t},{b},{:.6}\n", w.data()[t * cols + b]));
                }
            }
            let (h, wd) = (f.valid_tokens * CELL, cols * CELL);
            let mut heat = GlyphImage::blank(h, wd);
            for y in 0..h {
                for x in 0..wd {
                    let v = w.data()[(y / CELL) * cols + x / CELL];
                    heat.set(x, y, (1.0 - v) as f32);
                }
            }
            heat.quantize();
            let path = out.join(format!("attn_l{layer}_h{head}.pgm"));
            heat.write_pgm(&path)?;
            written.push(path);
        }
    }
    let csv_path = out.join("attention.csv");
    write(&csv_path, &csv)?;
    written.insert(0, csv_path);
    Ok(written)
}

/// One ablation setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub tag: String,
    pub overrides: Vec<String>,
    pub exclude_shards: Vec<String>,
}

/// The component grid (`N_enc = N_fus ∈ {1,2,3}` × text self-attention on/off)
/// followed by one run per excluded shard at the base setting.
pub fn ablation_grid(cfg: &RunConfig) -> Vec<Variant> {
    let mut out = Vec::new();
    for n in 1..=3 {
        for sa in [true, false] {
            out.push(Variant {
                tag: format!("enc{n}-fus{n}-sa{}", if sa { "on" } else { "off" }),
                overrides: vec![format!("mac.n_enc={n}"), format!("mac.n_fus={n}"), format!("mac.text_self_attn={sa}")],
                exclude_shards: vec![],
            });
        }
    }
    for s in &cfg.data.shards {
        out.push(Variant {
            tag: format!("wo-{}", s.name),
            overrides: vec![],
            exclude_shards: vec![s.name.clone()],
        });
    }
    out
}

/// Trains and scores every variant on the test split, writing one
/// checkpoint per variant and a combined report into `out`.
pub fn ablate(cfg: &RunConfig, data: &Path, ocr: &Path, out: &Path, variants: &[Variant]) -> Result<Vec<MetricsReport>> {
    let test = load_split(data, TEST)?;
    let mut reports = Vec::new();
    for v in variants {
        let vc = cfg.with_overrides(&v.overrides)?;
        let ckpt = out.join(format!("mac-{}.ckpt", v.tag));
        train(&vc, data, Some(ocr), &ckpt, &v.exclude_shards)?;
        let (model, _) = load_mac(&ckpt)?;
        let (r, _) = mac_report(&model, &test)?;
        let mut r = r.with_tag("variant", &v.tag);
        r.name = format!("mac[{}]", v.tag);
        for o in &v.overrides {
            if let Some((k, val)) = o.split_once('=') {
                r = r.with_tag(k, val);
            }
        }
        if !v.exclude_shards.is_empty() {
            r = r.with_tag("exclude", v.exclude_shards.join(","));
        }
        log::info!("ablation {}: span f1 {:.4} acc {:.4}", v.tag, r.seq_f1, r.bin_accuracy);
        reports.push(r);
    }
    write_reports(out, &reports)?;
    Ok(reports)
}
