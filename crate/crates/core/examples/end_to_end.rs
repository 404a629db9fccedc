//! The whole pipeline at toy scale: generate data, pretrain the recogniser,
//! train the correction model, score both on the test split and correct one
//! image, exporting its cross-attention maps. Runs in a few minutes in release mode.
//!
//! ```text
//! cargo run --release --example end_to_end -- /tmp/clozecheck-demo
//! ```

use std::path::PathBuf;

use clozecheck::config::RunConfig;
use clozecheck::dataset::read_manifest;
use clozecheck::eval::report_table;
use clozecheck::pipeline;

fn main() -> clozecheck::error::Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "demo".into()));
    let cfg = RunConfig::default().with_overrides(&[
        "data.n_train=150",
        "data.n_dev=20",
        "data.n_test=60",
        "train.epochs_pretrain=6",
        "train.epochs_mac=4",
    ])?;
    let data = root.join("data");
    let summary = pipeline::gen_data(&cfg, &data)?;
    println!("{} training samples from {} images", summary.train_samples, summary.train_images);

    let (ocr, mac) = (root.join("ocr.ckpt"), root.join("mac.ckpt"));
    pipeline::pretrain(&cfg, &data, &ocr)?;
    pipeline::train(&cfg, &data, Some(&ocr), &mac, &[])?;
    let r = pipeline::eval(&cfg, &data, &ocr, &mac, &root.join("eval"))?;
    print!("{}", report_table(&[r.baseline, r.mac]));

    let test = read_manifest(&data.join(pipeline::TEST))?;
    let s = test.iter().find(|s| s.y == 1).unwrap_or(&test[0]);
    let c = pipeline::correct(&mac, Some(&ocr), &data.join(&s.image_path), &s.answer)?;
    println!("{} (written {}, answer {}): {}", s.id, s.content, s.answer, serde_json::to_string(&c)?);
    for p in pipeline::viz_attn(&mac, &data.join(&s.image_path), &s.answer, &root.join("attention"))? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
