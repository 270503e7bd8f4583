//! Command implementations behind the `sits-s4` binary. Each command
//! returns the JSON document printed on stdout.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data_io::{open_dataset, Split};
use crate::error::{Result, S4Error};
use crate::evaluation::{cloud_report, evaluate, plot_cloud_bins, plot_loss_curves};
use crate::sits::Modality;
use crate::synthetic::generate_dataset;
use crate::training::{finetune, fit_dataset_stats, init_checkpoint, pretrain, Ablation, EpochMetrics};

#[derive(Debug, Parser)]
#[command(name = "sits-s4", version, about = "Multi-modal self-supervised pre-training for SITS segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired radar/optical dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Self-supervised pre-training on the train split.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ablation: Option<Ablation>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a pre-training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Supervised fine-tuning on a fraction of the labelled train split.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        label_fraction: Option<f64>,
        #[arg(long)]
        modality: Option<Modality>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Segmentation metrics of a fine-tuned checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        cloud_report: bool,
        /// Second checkpoint for per-bin mIoU deltas.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        edges: Option<Vec<f64>>,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            S4Error::MissingFile(p) => S4Error::InvalidConfig(format!("config file {} not found", p.display())),
            other => other,
        }),
        None => Ok(RunConfig::default()),
    }
}

fn run_dir(cfg: &RunConfig, output: &Path) -> PathBuf {
    cfg.paths.run_dir.clone().unwrap_or_else(|| match output.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    })
}

/// NDJSON metrics writer.
struct MetricsLog {
    file: fs::File,
    error: Option<std::io::Error>,
}

impl MetricsLog {
    fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            file: fs::File::create(path)?,
            error: None,
        })
    }

    fn write(&mut self, m: &EpochMetrics) {
        info!(
            "epoch {} [{}] loss_c={:.5} loss_r={:.5} loss={:.5}",
            m.epoch, m.split, m.loss_c, m.loss_r, m.loss_joint
        );
        let line = serde_json::to_string(m).expect("metrics serialise");
        if let Err(e) = writeln!(self.file, "{line}") {
            self.error.get_or_insert(e);
        }
    }

    fn finish(self) -> Result<()> {
        match self.error {
            Some(e) => Err(e.into()),
            None => Ok(()),
        }
    }
}

pub fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::GenData { config, out, n, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if seed.is_some() {
                cfg.seed = seed;
            }
            let cfg = cfg.resolve()?;
            let manifest = generate_dataset(&cfg.world, n, &out)?;
            cfg.echo(&cfg.paths.run_dir.clone().unwrap_or_else(|| out.clone()), "gen-data")?;
            let count = |s| manifest.split(s).len();
            Ok(json!({
                "command": "gen-data",
                "out": out,
                "samples": manifest.entries.len(),
                "train": count(Split::Train),
                "val": count(Split::Val),
                "test": count(Split::Test),
            }))
        }
        Command::Pretrain { config, data, out, ablation, epochs, seed, resume } => {
            let mut cfg = load_config(config.as_deref())?;
            if seed.is_some() {
                cfg.seed = seed;
            }
            if let Some(a) = ablation {
                cfg.train.ablation = a;
            }
            if let Some(e) = epochs {
                cfg.train.pretrain_epochs = e;
            }
            let cfg = cfg.resolve()?;
            let dir = run_dir(&cfg, &out);
            cfg.echo(&dir, "pretrain")?;
            let manifest = open_dataset(&data)?;
            let train = manifest.load_split(Split::Train)?;
            let val = manifest.load_split(Split::Val)?;
            let ckpt = match resume {
                Some(p) => {
                    let c = Checkpoint::load(&p, Some(&cfg.model))?;
                    if c.loss != cfg.loss {
                        return Err(S4Error::IncompatibleCheckpoint("loss config differs from the checkpoint".into()));
                    }
                    c
                }
                None => init_checkpoint(cfg.model.clone(), cfg.train.clone(), cfg.loss.clone(), fit_dataset_stats(&train)?)?,
            };
            let mut log = MetricsLog::create(&dir.join("pretrain_metrics.ndjson"))?;
            let val = (!val.is_empty()).then_some(val.as_slice());
            let mut ckpt = pretrain(&train, val, ckpt, &cfg.train, &mut |m| log.write(m))?;
            log.finish()?;
            ckpt.save(&out)?;
            if !ckpt.history.is_empty() {
                plot_loss_curves(&ckpt.history, &dir.join("pretrain_loss.png"))?;
            }
            let last = ckpt.history.iter().rev().find(|m| m.split == "train");
            Ok(json!({
                "command": "pretrain",
                "checkpoint": out,
                "ablation": cfg.train.ablation,
                "epochs": ckpt.epoch,
                "final": last,
            }))
        }
        Command::Finetune { ckpt, data, out, config, label_fraction, modality, epochs } => {
            let mut base = Checkpoint::load(&ckpt, None)?;
            let mut cfg = match config.as_deref() {
                Some(p) => {
                    let c = load_config(Some(p))?;
                    if &c.model != base.model_config() {
                        return Err(S4Error::IncompatibleCheckpoint(
                            "model section of the config differs from the checkpoint".into(),
                        ));
                    }
                    c
                }
                None => RunConfig {
                    model: base.model_config().clone(),
                    loss: base.loss.clone(),
                    train: base.train.clone(),
                    ..RunConfig::default()
                },
            };
            if let Some(f) = label_fraction {
                cfg.train.label_fraction = f;
            }
            if let Some(m) = modality {
                cfg.train.inference_modality = m;
            }
            if let Some(e) = epochs {
                cfg.train.finetune_epochs = e;
            }
            let cfg = cfg.resolve()?;
            let out = out.unwrap_or_else(|| ckpt.with_extension("finetuned.ckpt"));
            let dir = run_dir(&cfg, &out);
            cfg.echo(&dir, "finetune")?;
            let manifest = open_dataset(&data)?;
            let train = manifest.load_split(Split::Train)?;
            let classes = base.model_config().classes;
            if let Some(bad) = train.iter().find(|p| p.validate(Some(classes)).is_err()) {
                return Err(S4Error::IncompatibleCheckpoint(format!(
                    "sample {} does not fit a {classes}-class model",
                    bad.location_id
                )));
            }
            base.history.clear();
            let mut log = MetricsLog::create(&dir.join("finetune_metrics.ndjson"))?;
            let mut tuned = finetune(base, &train, &cfg.train, &mut |m| log.write(m))?;
            log.finish()?;
            tuned.save(&out)?;
            if !tuned.history.is_empty() {
                plot_loss_curves(&tuned.history, &dir.join("finetune_loss.png"))?;
            }
            Ok(json!({
                "command": "finetune",
                "checkpoint": out,
                "modality": cfg.train.inference_modality,
                "label_fraction": cfg.train.label_fraction,
                "epochs": tuned.epoch,
                "final_loss_ce": tuned.history.last().and_then(|m| m.loss_ce),
            }))
        }
        Command::Eval { ckpt, data, split, cloud_report: want_bins, baseline, edges, plot } => {
            let mut model = Checkpoint::load(&ckpt, None)?;
            let manifest = open_dataset(&data)?;
            let pairs = manifest.load_split(split)?;
            if pairs.is_empty() {
                return Err(S4Error::EmptyDataset);
            }
            let report = if want_bins {
                let edges = edges.unwrap_or_else(|| crate::evaluation::DEFAULT_CLOUD_EDGES.to_vec());
                let mut base = baseline.map(|p| Checkpoint::load(&p, None)).transpose()?;
                cloud_report(&mut model, &pairs, &edges, base.as_mut())?
            } else {
                evaluate(&mut model, &pairs)?
            };
            if let Some(p) = plot {
                if report.cloud_bins.is_some() {
                    plot_cloud_bins(&report, &p)?;
                } else {
                    plot_loss_curves(&model.history, &p)?;
                }
            }
            Ok(serde_json::to_value(&report)?)
        }
    }
}
