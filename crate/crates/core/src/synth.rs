//! Synthetic corpora: random text lines rendered into padded images, and
//! train/dev/test splits built from them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{perturb, EditOp};
use crate::dataset::Sample;
use crate::error::Result;
use crate::glyphgen::{pad_to_width, GlyphBank, GlyphImage, GlyphStyle, LineOptions};
use crate::ocr::Geometry;
use crate::vocab::{ConfusionSet, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub min_len: usize,
    pub max_len: usize,
    pub ligature_prob: f64,
    pub confusion_prob: f64,
    pub noise: f32,
    /// Number of distinct writer styles.
    pub styles: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            min_len: 2,
            max_len: 5,
            ligature_prob: 0.2,
            confusion_prob: 0.3,
            noise: 0.0,
            styles: 64,
        }
    }
}

/// One rendered line and its ground content.
#[derive(Clone, Debug, PartialEq)]
pub struct Line {
    pub image: GlyphImage,
    pub content: String,
    pub style_id: u32,
}

fn mix(seed: u64, k: u64) -> u64 {
    let mut z = seed.wrapping_add(k.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Renders `n` random lines. Line `i` depends only on `(seed, i)`.
pub fn render_lines(
    n: usize,
    bank: &GlyphBank,
    confusion: &ConfusionSet,
    geometry: &Geometry,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<Vec<Line>> {
    let styles: Vec<GlyphStyle> = {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, u64::MAX));
        (0..cfg.styles.max(1)).map(|s| GlyphStyle::random(s, &mut rng)).collect()
    };
    let opts = LineOptions {
        ligature_prob: cfg.ligature_prob,
        confusion_prob: cfg.confusion_prob,
        noise: cfg.noise,
        jitter: true,
    };
    let vocab = bank.vocab();
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64));
            let style = styles[rng.gen_range(0..styles.len())];
            loop {
                let len = rng.gen_range(cfg.min_len..=cfg.max_len);
                let text: String = (0..len).map(|_| vocab.random_char(&mut rng)).collect();
                let line = bank.render_line_with(&text, &style, &opts, Some(confusion), &mut rng)?;
                if line.image.width <= geometry.max_width {
                    return Ok(Line {
                        image: pad_to_width(&line.image, geometry.max_width, geometry.block_width)?,
                        content: text,
                        style_id: style.style_id,
                    });
                }
            }
        })
        .collect()
}

/// Test-set answers: a `negative_ratio` share of images is paired with an
/// answer carrying one random edit, the rest with their own content.
pub fn test_samples(
    lines: &[Line],
    image_paths: &[String],
    negative_ratio: f64,
    confusion: &ConfusionSet,
    vocab: &Vocabulary,
    seed: u64,
) -> Vec<Sample> {
    let n_neg = (lines.len() as f64 * negative_ratio).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..lines.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let negatives: std::collections::BTreeSet<usize> = order[..n_neg.min(lines.len())].iter().copied().collect();
    lines
        .iter()
        .zip(image_paths)
        .enumerate()
        .map(|(i, (line, path))| {
            let id = format!("test{i:05}");
            let pos = Sample::positive(id.clone(), path.clone(), line.content.clone(), line.image.valid_width, "test".into());
            if !negatives.contains(&i) {
                return pos;
            }
            loop {
                let op = [EditOp::Sub, EditOp::Del, EditOp::Ins][rng.gen_range(0..3)];
                if let Some(answer) = perturb(&line.content, op, confusion, vocab, &mut rng) {
                    let s = pos.with_answer(id.clone(), answer);
                    if s.y == 1 {
                        return s;
                    }
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_are_deterministic_and_fit() {
        let v = Vocabulary::synthetic();
        let bank = GlyphBank::synthetic(&v, 32, 1);
        let cs = ConfusionSet::clustered(&v);
        let geo = Geometry::default();
        let cfg = SynthConfig::default();
        let a = render_lines(30, &bank, &cs, &geo, &cfg, 5).unwrap();
        let b = render_lines(30, &bank, &cs, &geo, &cfg, 5).unwrap();
        assert_eq!(a, b);
        for l in &a {
            assert_eq!(l.image.width, geo.max_width);
            assert!(l.image.valid_width <= geo.max_width);
            let n = l.content.chars().count();
            assert!((cfg.min_len..=cfg.max_len).contains(&n));
        }
        // prefix stability: line i does not depend on n
        let c = render_lines(10, &bank, &cs, &geo, &cfg, 5).unwrap();
        assert_eq!(&a[..10], &c[..]);
    }

    #[test]
    fn test_ratio() {
        let v = Vocabulary::synthetic();
        let bank = GlyphBank::synthetic(&v, 32, 1);
        let cs = ConfusionSet::clustered(&v);
        let lines = render_lines(200, &bank, &cs, &Geometry::default(), &SynthConfig::default(), 2).unwrap();
        let paths: Vec<String> = (0..200).map(|i| format!("{i}.pgm")).collect();
        let s = test_samples(&lines, &paths, 0.15, &cs, &v, 3);
        assert_eq!(s.len(), 200);
        assert_eq!(s.iter().filter(|x| x.y == 1).count(), 30);
        for x in &s {
            x.validate(&v, 160).unwrap();
        }
    }
}
