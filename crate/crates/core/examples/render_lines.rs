//! Renders synthetic text lines to PGM files, including confusion glyphs and
//! ligature overlaps.
//!
//! ```text
//! cargo run --example render_lines -- /tmp/lines
//! ```

use std::path::PathBuf;

use clozecheck::glyphgen::GlyphBank;
use clozecheck::ocr::Geometry;
use clozecheck::synth::{render_lines, SynthConfig};
use clozecheck::vocab::{ConfusionSet, Vocabulary};

fn main() -> clozecheck::error::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "lines".into()));
    std::fs::create_dir_all(&out).expect("output dir");
    let vocab = Vocabulary::synthetic();
    let bank = GlyphBank::synthetic(&vocab, 32, 1);
    let confusion = ConfusionSet::clustered(&vocab);
    let geo = Geometry::default();
    for (tag, cfg) in [
        ("clean", SynthConfig { ligature_prob: 0.0, confusion_prob: 0.0, ..SynthConfig::default() }),
        ("bench", SynthConfig::default()),
    ] {
        for (i, line) in render_lines(6, &bank, &confusion, &geo, &cfg, 3)?.iter().enumerate() {
            let path = out.join(format!("{tag}{i}.pgm"));
            line.image.write_pgm(&path)?;
            println!("{}  content={}  ink width={}px", path.display(), line.content, line.image.valid_width);
        }
    }
    Ok(())
}
