use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mpan_core::episodes::generate_synthetic;
use mpan_core::harness::{
    cluster_demo, eval_stage2, prepare_dataset, train_stage1, Checkpoint, DataSource, TrainConfig, Trainer,
    TrainOutputs,
};
use mpan_core::pretext::{generate_permutation_set, NUM_PATCHES};
use mpan_core::{Error, Result};

/// Multi-pretext self-supervised few-shot learning.
#[derive(Parser, Debug)]
#[command(name = "mpan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON training config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the data, model, and episode seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Read images from a dataset directory instead of the config's source.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured synthetic dataset as a dataset directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the jigsaw permutation set as text.
    Permset {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: joint training. Writes metrics.jsonl and checkpoint.mpan.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: episodic evaluation of a checkpoint. Writes an EvalReport.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of episodes; the config's count when omitted.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Cluster the base pool with the GC head and k-means and report both.
    ClusterDemo {
        #[command(flatten)]
        common: Common,
        /// Backbone weights; a freshly initialized backbone when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds.data = seed;
        cfg.seeds.model = seed;
        cfg.seeds.episode = seed;
        cfg.jigsaw.permset_seed = seed;
    }
    if let Some(dir) = &common.data {
        cfg.data.source = DataSource::Directory(dir.clone());
    }
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: String) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, out } => {
            let cfg = load_config(&common)?;
            let DataSource::Synthetic { num_classes, per_class, image_size } = cfg.data.source else {
                return Err(Error::Config("gen-data needs a synthetic data source".into()));
            };
            let ds = generate_synthetic(num_classes, per_class, image_size, cfg.seeds.data)?;
            ds.save(&out)?;
            eprintln!("wrote {} images of {} classes to {}", ds.len(), ds.num_classes(), out.display());
        }
        Command::Permset { common, out } => {
            let cfg = load_config(&common)?;
            let set = generate_permutation_set(NUM_PATCHES, cfg.jigsaw.permutations, cfg.jigsaw.permset_seed)?;
            std::fs::write(&out, set.to_text()).map_err(|e| Error::io(&out, e))?;
            eprintln!("mean pairwise hamming {:.3}", set.mean_pairwise_hamming());
        }
        Command::Train { common, out } => {
            let cfg = load_config(&common)?;
            let ds = prepare_dataset(&cfg)?;
            let result = train_stage1(&cfg, &ds, &TrainOutputs { dir: Some(out.clone()) })?;
            if let Some(last) = result.metrics.last() {
                eprintln!("epoch {} total loss {:.4}; outputs in {}", last.epoch, last.loss_total, out.display());
            }
        }
        Command::Eval { common, checkpoint, out, episodes } => {
            let cfg = load_config(&common)?;
            let ds = prepare_dataset(&cfg)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let report = eval_stage2(&ckpt, &cfg, &ds, episodes)?;
            eprintln!("accuracy {:.4} ± {:.4} over {} episodes", report.mean_accuracy, report.ci95_halfwidth, report.episodes);
            emit(out.as_deref(), serde_json::to_string_pretty(&report)?)?;
        }
        Command::ClusterDemo { common, checkpoint, out } => {
            let cfg = load_config(&common)?;
            let ds = prepare_dataset(&cfg)?;
            let model = Trainer::new(&cfg, &ds)?.model;
            if let Some(path) = checkpoint {
                Checkpoint::load(&path)?.restore(&model, None)?;
            }
            emit(out.as_deref(), serde_json::to_string_pretty(&cluster_demo(&cfg, &ds, &model.backbone)?)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
