//! Correction samples and their JSONL manifests.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::{derive_labels_str, reduce_binary, LabelSeq};
use crate::error::{io_err, Error, Result};
use crate::glyphgen::GlyphImage;
use crate::vocab::Vocabulary;

/// One correction instance. `image_path` is relative to the manifest file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image_path: String,
    /// Text actually written in the image.
    pub content: String,
    /// Expected answer text.
    pub answer: String,
    pub labels: LabelSeq,
    /// 0 = right, 1 = wrong.
    pub y: u8,
    pub valid_width: usize,
    #[serde(default)]
    pub shard: String,
}

impl Sample {
    /// A sample whose answer equals its content.
    pub fn positive(id: String, image_path: String, content: String, valid_width: usize, shard: String) -> Self {
        let labels = LabelSeq::all_o(content.chars().count());
        Self {
            id,
            image_path,
            answer: content.clone(),
            content,
            labels,
            y: 0,
            valid_width,
            shard,
        }
    }

    /// Copy of `self` re-targeted at a different answer, labels recomputed.
    pub fn with_answer(&self, id: String, answer: String) -> Self {
        let labels = derive_labels_str(&self.content, &answer);
        let y = reduce_binary(&labels);
        Self {
            id,
            answer,
            labels,
            y,
            ..self.clone()
        }
    }

    pub fn validate(&self, vocab: &Vocabulary, max_width: usize) -> std::result::Result<(), String> {
        if self.content.is_empty() {
            return Err("empty content".into());
        }
        for (field, text) in [("content", &self.content), ("answer", &self.answer)] {
            if let Err(e) = vocab.encode_text(text) {
                return Err(format!("{field}: {e}"));
            }
        }
        let want = derive_labels_str(&self.content, &self.answer);
        if want != self.labels {
            return Err(format!("labels {} do not match derived {}", self.labels, want));
        }
        if self.y != reduce_binary(&self.labels) {
            return Err(format!("y = {} disagrees with labels", self.y));
        }
        if self.valid_width == 0 || self.valid_width > max_width {
            return Err(format!("valid_width {} outside 1..={max_width}", self.valid_width));
        }
        Ok(())
    }
}

/// Serialises samples one JSON object per line.
pub fn manifest_string(samples: &[Sample]) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, samples: &[Sample]) -> Result<()> {
    let text = manifest_string(samples)?;
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<Sample>> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}

/// Checks every sample, reporting the first bad line.
pub fn validate_manifest(path: &Path, samples: &[Sample], vocab: &Vocabulary, max_width: usize) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        s.validate(vocab, max_width).map_err(|msg| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        })?;
    }
    Ok(())
}

/// A manifest plus the images it references, padded to a common width.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub images: BTreeMap<String, GlyphImage>,
}

impl Dataset {
    pub fn load(manifest: &Path) -> Result<Self> {
        let samples = read_manifest(manifest)?;
        let dir = manifest.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let mut images = BTreeMap::new();
        for s in &samples {
            if images.contains_key(&s.image_path) {
                continue;
            }
            let mut img = GlyphImage::read_pgm(&dir.join(&s.image_path))?;
            img.valid_width = s.valid_width;
            images.insert(s.image_path.clone(), img);
        }
        Ok(Self { samples, images })
    }

    pub fn image(&self, s: &Sample) -> &GlyphImage {
        &self.images[&s.image_path]
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples whose shard is not in `exclude`.
    pub fn without_shards(&self, exclude: &[String]) -> Self {
        let samples: Vec<Sample> = self
            .samples
            .iter()
            .filter(|s| !exclude.contains(&s.shard))
            .cloned()
            .collect();
        let images = samples
            .iter()
            .map(|s| (s.image_path.clone(), self.images[&s.image_path].clone()))
            .collect();
        Self { samples, images }
    }

    /// Distinct images in first-seen order, each with its content.
    pub fn unique_images(&self) -> Vec<(&GlyphImage, &str)> {
        let mut seen = std::collections::BTreeSet::new();
        self.samples
            .iter()
            .filter(|s| seen.insert(s.image_path.as_str()))
            .map(|s| (self.image(s), s.content.as_str()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Sample {
        Sample::positive("s0".into(), "img/0.pgm".into(), "abc".into(), 40, "a".into())
    }

    #[test]
    fn positive_is_valid() {
        let s = sample();
        assert_eq!(s.y, 0);
        assert!(s.labels.is_all_o());
        s.validate(&Vocabulary::synthetic(), 64).unwrap();
    }

    #[test]
    fn with_answer_relabels() {
        let s = sample().with_answer("s1".into(), "abd".into());
        assert_eq!(s.y, 1);
        assert_eq!(s.content, "abc");
        assert_eq!(s.labels.to_strings(), ["O", "O", "O", "B-sub"]);
        s.validate(&Vocabulary::synthetic(), 64).unwrap();
    }

    #[test]
    fn validate_catches_tampering() {
        let v = Vocabulary::synthetic();
        let mut s = sample().with_answer("s1".into(), "ab".into());
        s.y = 0;
        assert!(s.validate(&v, 64).is_err());
        let mut s = sample();
        s.answer = "abd".into();
        assert!(s.validate(&v, 64).is_err());
        let mut s = sample();
        s.valid_width = 65;
        assert!(s.validate(&v, 64).is_err());
        let mut s = sample();
        s.content = "a!c".into();
        assert!(s.validate(&v, 64).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let samples = vec![sample(), sample().with_answer("s1".into(), "xabc".into())];
        write_manifest(&path, &samples).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), samples);
        let text = std::fs::read_to_string(&path).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["id", "image_path", "content", "answer", "labels", "y", "valid_width"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn bad_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let good = serde_json::to_string(&sample()).unwrap();
        std::fs::write(&path, format!("{good}\n{{\"id\": 3}}\n")).unwrap();
        match read_manifest(&path) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
