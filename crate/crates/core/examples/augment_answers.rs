//! Expands two positive samples into labelled negatives by editing the answer.

use clozecheck::augment::{augment, AugmentConfig};
use clozecheck::dataset::Sample;
use clozecheck::vocab::{ConfusionSet, Vocabulary};

fn main() {
    let vocab = Vocabulary::synthetic();
    let confusion = ConfusionSet::clustered(&vocab);
    let content: Vec<char> = vocab.chars().iter().step_by(5).copied().collect();
    let originals = vec![
        Sample::positive("s0".into(), "images/s0.pgm".into(), content[..4].iter().collect(), 70, "main".into()),
        Sample::positive("s1".into(), "images/s1.pgm".into(), content[4..6].iter().collect(), 36, "main".into()),
    ];
    let cfg = AugmentConfig::default();
    let out = augment(&originals, &cfg, &confusion, &vocab);
    let (lo, hi) = cfg.expansion_bounds();
    println!("{} samples from {} images (each image yields {lo}..={hi})", out.samples.len(), originals.len());
    for s in &out.samples {
        println!("{:<10} y={} content={} answer={:<6} {}", s.id, s.y, s.content, s.answer, s.labels.to_strings().join(" "));
    }
}
