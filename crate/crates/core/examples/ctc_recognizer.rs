//! Trains the CTC recogniser on a few clean lines and prints greedy readings.
//! Takes a minute or two in release mode.
//!
//! ```text
//! cargo run --release --example ctc_recognizer -- 120 8
//! ```

use clozecheck::glyphgen::GlyphBank;
use clozecheck::ocr::{cer, BackboneConfig, Geometry, OcrModel};
use clozecheck::synth::{render_lines, SynthConfig};
use clozecheck::train::{train_ocr, TrainConfig};
use clozecheck::vocab::{ConfusionSet, Vocabulary};

fn main() -> clozecheck::error::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("a count"));
    let n = args.next().unwrap_or(120);
    let epochs = args.next().unwrap_or(8);

    let vocab = Vocabulary::synthetic();
    let bank = GlyphBank::synthetic(&vocab, 32, 1);
    let geo = Geometry::default();
    let synth = SynthConfig { ligature_prob: 0.0, confusion_prob: 0.0, ..SynthConfig::default() };
    let lines = render_lines(n + 8, &bank, &ConfusionSet::clustered(&vocab), &geo, &synth, 11)?;
    let data: Vec<_> = lines.iter().map(|l| (&l.image, l.content.as_str())).collect();
    let (train, dev) = data.split_at(n);

    let mut model = OcrModel::new(&vocab, geo, BackboneConfig { dropout: 0.0, ..BackboneConfig::default() }, 1)?;
    let cfg = TrainConfig { lr: 3e-3, epochs, ..TrainConfig::pretrain_defaults() };
    for e in train_ocr(&mut model, train, dev, &cfg)? {
        println!("epoch {:>2}  loss {:.3}  dev cer {:.3}", e.epoch, e.train_loss, e.dev_cer.unwrap_or(f64::NAN));
    }
    for (img, truth) in dev {
        let read = model.recognize(img)?;
        println!("{truth:<6} -> {read:<6} cer {:.2}", cer(&read, truth));
    }
    Ok(())
}
