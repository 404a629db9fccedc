//! Runs an untrained correction model on one line and prints the shapes and
//! masking of its attention maps. Padded blocks get exactly zero weight.

use clozecheck::fusion::{MacConfig, MacModel};
use clozecheck::glyphgen::GlyphBank;
use clozecheck::ocr::{BackboneConfig, Geometry};
use clozecheck::synth::{render_lines, SynthConfig};
use clozecheck::vocab::{ConfusionSet, Vocabulary};

fn main() -> clozecheck::error::Result<()> {
    let vocab = Vocabulary::synthetic();
    let geo = Geometry::default();
    let bank = GlyphBank::synthetic(&vocab, geo.img_height, 1);
    let line = render_lines(1, &bank, &ConfusionSet::clustered(&vocab), &geo, &SynthConfig::default(), 5)?.remove(0);
    let model = MacModel::new(&vocab, geo, BackboneConfig::default(), MacConfig::default(), 0)?;

    let answer = line.content.clone();
    let (f, pred) = model.inspect(&line.image, &answer)?;
    println!("content {}  answer {answer}", line.content);
    println!("valid blocks {} of {}, valid text positions {}", f.valid_blocks, geo.num_blocks(), f.valid_tokens);
    for (layer, heads) in f.cross_attention.iter().enumerate() {
        for (h, w) in heads.iter().enumerate() {
            let (rows, cols) = w.dims2();
            let row0 = w.row(0);
            let on_padding: f64 = row0[f.valid_blocks..].iter().sum();
            let mass: f64 = row0[..f.valid_blocks].iter().sum();
            println!("fusion {layer} head {h}: [{rows}x{cols}]  row 0 mass {mass:.6}, on padding {on_padding}");
        }
    }
    println!("untrained labels: {}", pred.labels.to_strings().join(" "));
    Ok(())
}
