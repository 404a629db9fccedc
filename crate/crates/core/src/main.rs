use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use clozecheck::config::RunConfig;
use clozecheck::pipeline;

#[derive(Parser)]
#[command(name = "clozecheck", version, about = "Check handwritten fill-in-the-blank answers against the expected text")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML or JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override such as `mac.n_fus=3`; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut sets = self.set.clone();
        if let Some(s) = self.seed {
            sets.push(format!("seed={s}"));
        }
        Ok(base.with_overrides(&sets)?)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Render and augment a synthetic corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the CTC recogniser.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the correction model on a frozen backbone.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Recogniser checkpoint supplying the backbone.
        #[arg(long, required_unless_present = "no_pretrain")]
        ocr: Option<PathBuf>,
        /// Keep the backbone at its random initialisation.
        #[arg(long, conflicts_with = "ocr")]
        no_pretrain: bool,
        /// Training shard to leave out; repeatable.
        #[arg(long)]
        exclude_shard: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the recognise-and-compare baseline and the correction model on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ocr: PathBuf,
        #[arg(long)]
        mac: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label one image against an answer; prints JSON.
    Correct {
        #[arg(long)]
        mac: PathBuf,
        /// Also report what the recogniser reads.
        #[arg(long)]
        ocr: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        answer: String,
    },
    /// Export cross-attention weights as CSV and PGM heatmaps.
    VizAttn {
        #[arg(long)]
        mac: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        answer: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score the layer-count, self-attention and shard ablations.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ocr: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run only variants whose tag contains this string.
        #[arg(long)]
        only: Option<String>,
    },
}

fn snapshot(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    cfg.save(&dir.join("config.json"))?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::GenData { common, out } => {
            let cfg = common.load()?;
            let s = pipeline::gen_data(&cfg, &out).context("gen-data")?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Cmd::Pretrain { common, data, out } => {
            let cfg = common.load()?;
            snapshot(&cfg, &out)?;
            let log = pipeline::pretrain(&cfg, &data, &out).context("pretrain")?;
            if let Some(last) = log.last() {
                println!("{}", serde_json::to_string(last)?);
            }
        }
        Cmd::Train {
            common,
            data,
            ocr,
            no_pretrain,
            exclude_shard,
            out,
        } => {
            let cfg = common.load()?;
            snapshot(&cfg, &out)?;
            let ocr = if no_pretrain { None } else { ocr.as_deref() };
            let log = pipeline::train(&cfg, &data, ocr, &out, &exclude_shard).context("train")?;
            if let Some(last) = log.last() {
                println!("{}", serde_json::to_string(last)?);
            }
        }
        Cmd::Eval {
            common,
            data,
            ocr,
            mac,
            out,
        } => {
            let cfg = common.load()?;
            let r = pipeline::eval(&cfg, &data, &ocr, &mac, &out).context("eval")?;
            print!("{}", clozecheck::eval::report_table(&[r.baseline, r.mac]));
        }
        Cmd::Correct { mac, ocr, image, answer } => {
            let c = pipeline::correct(&mac, ocr.as_deref(), &image, &answer)?;
            println!("{}", serde_json::to_string(&c)?);
        }
        Cmd::VizAttn { mac, image, answer, out } => {
            for p in pipeline::viz_attn(&mac, &image, &answer, &out)? {
                println!("{}", p.display());
            }
        }
        Cmd::Ablate {
            common,
            data,
            ocr,
            out,
            only,
        } => {
            let cfg = common.load()?;
            let mut variants = pipeline::ablation_grid(&cfg);
            if let Some(f) = only {
                variants.retain(|v| v.tag.contains(&f));
            }
            let reports = pipeline::ablate(&cfg, &data, &ocr, &out, &variants)?;
            print!("{}", clozecheck::eval::report_table(&reports));
        }
    }
    Ok(())
}
