//! Negative-sample generation by editing answers while images stay fixed.
//!
//! Every original gets three families of rounds: substitution with a
//! shape-similar character, deletion, and insertion. Each round starts again
//! from the original answer, so a generated negative carries exactly one edit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::vocab::{ConfusionSet, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub max_sub_rounds: usize,
    pub max_del_rounds: usize,
    pub max_ins_rounds: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_sub_rounds: 3,
            max_del_rounds: 3,
            max_ins_rounds: 3,
            seed: 42,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            max_sub_rounds: 0,
            max_del_rounds: 0,
            max_ins_rounds: 0,
            ..Self::default()
        }
    }

    /// Same round count for every family.
    pub fn uniform(max_rounds: usize, seed: u64) -> Self {
        Self {
            max_sub_rounds: max_rounds,
            max_del_rounds: max_rounds,
            max_ins_rounds: max_rounds,
            seed,
        }
    }

    fn maxima(&self) -> [usize; 3] {
        [self.max_sub_rounds, self.max_del_rounds, self.max_ins_rounds]
    }

    /// Fewest and most samples one original can expand into, itself included.
    pub fn expansion_bounds(&self) -> (usize, usize) {
        let m = self.maxima();
        (1 + m.iter().filter(|&&x| x > 0).count(), 1 + m.iter().sum::<usize>())
    }

    /// Expected number of samples per original, itself included.
    pub fn expected_expansion(&self) -> f64 {
        1.0 + self
            .maxima()
            .iter()
            .map(|&m| if m == 0 { 0.0 } else { (1 + m) as f64 / 2.0 })
            .sum::<f64>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditOp {
    Sub,
    Del,
    Ins,
}

impl EditOp {
    fn tag(self) -> &'static str {
        match self {
            EditOp::Sub => "sub",
            EditOp::Del => "del",
            EditOp::Ins => "ins",
        }
    }
}

/// Applies one random edit of kind `op` to `answer`. Returns `None` when the
/// edit is impossible (substituting or deleting in an empty answer).
pub fn perturb(
    answer: &str,
    op: EditOp,
    confusion: &ConfusionSet,
    vocab: &Vocabulary,
    rng: &mut impl Rng,
) -> Option<String> {
    let mut chars: Vec<char> = answer.chars().collect();
    match op {
        EditOp::Sub | EditOp::Del if chars.is_empty() => return None,
        EditOp::Sub => {
            let j = rng.gen_range(0..chars.len());
            chars[j] = confusion.substitute(chars[j], vocab, rng);
        }
        EditOp::Del => {
            let j = rng.gen_range(0..chars.len());
            chars.remove(j);
        }
        EditOp::Ins => {
            let j = rng.gen_range(0..=chars.len());
            chars.insert(j, vocab.random_char(rng));
        }
    }
    Some(chars.into_iter().collect())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentOutput {
    pub samples: Vec<Sample>,
    /// Rounds that could not produce a negative: impossible edits, or edits
    /// that happened to reproduce the handwritten content.
    pub skipped: usize,
}

fn sample_seed(base: u64, index: usize) -> u64 {
    let mut z = base ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Expands `originals` with generated negatives, each original followed by
/// its own negatives.
pub fn augment(
    originals: &[Sample],
    cfg: &AugmentConfig,
    confusion: &ConfusionSet,
    vocab: &Vocabulary,
) -> AugmentOutput {
    let mut out = AugmentOutput::default();
    for (i, orig) in originals.iter().enumerate() {
        out.samples.push(orig.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, i));
        for (op, max) in [EditOp::Sub, EditOp::Del, EditOp::Ins].into_iter().zip(cfg.maxima()) {
            if max == 0 {
                continue;
            }
            let rounds = rng.gen_range(1..=max);
            for k in 0..rounds {
                let Some(answer) = perturb(&orig.answer, op, confusion, vocab, &mut rng) else {
                    out.skipped += 1;
                    continue;
                };
                let s = orig.with_answer(format!("{}-{}{}", orig.id, op.tag(), k), answer);
                if s.y == 0 {
                    out.skipped += 1;
                    continue;
                }
                out.samples.push(s);
            }
        }
    }
    if out.skipped > 0 {
        log::warn!("augmentation skipped {} rounds", out.skipped);
    }
    out
}
