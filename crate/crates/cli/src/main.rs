use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use protoseg::encoder::load_checkpoint;
use protoseg::harness::{self, PipelineConfig};

#[derive(Parser)]
#[command(name = "protoseg", version, about = "Few-shot segmentation pre-training pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON pipeline configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dot-path override such as `stage1.tau=0.1`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<PipelineConfig> {
        let base = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        let mut cfg = base.with_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled dataset and its manifest.
    GenSynthetic {
        #[arg(long, default_value_t = 10)]
        patients: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pre-training from a random encoder.
    PretrainStage1(Common),
    /// Episodic training on superpixel pseudo labels.
    PretrainStage2 {
        #[command(flatten)]
        common: Common,
        /// Starting checkpoint.
        #[arg(long)]
        init: PathBuf,
    },
    /// Episodic training on ground-truth and pseudo-label episodes.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// One-shot evaluation on the held-out fold.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Heatmaps of backbone activation norms.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// All phases followed by evaluation.
    RunAll {
        #[command(flatten)]
        common: Common,
        /// Repeat the pipeline for every fold and write a summary.
        #[arg(long)]
        all_folds: bool,
    },
}

fn print_path(p: &Path) {
    println!("{}", p.display());
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic {
            patients,
            size,
            seed,
            out,
        } => {
            print_path(&harness::gen_synthetic(patients, size, seed, &out)?);
        }
        Command::PretrainStage1(common) => print_path(&harness::run_stage1(&common.resolve()?)?),
        Command::PretrainStage2 { common, init } => {
            print_path(&harness::run_stage2(&common.resolve()?, &init)?);
        }
        Command::Finetune { common, checkpoint } => {
            print_path(&harness::finetune(&common.resolve()?, &checkpoint)?);
        }
        Command::Evaluate { common, checkpoint } => {
            print_json(&harness::evaluate(&common.resolve()?, &checkpoint)?)?;
        }
        Command::ExportFeatures {
            checkpoint,
            images,
            out,
        } => {
            let encoder = load_checkpoint(&checkpoint)?;
            for p in harness::export_features(&encoder, &images, &out)? {
                print_path(&p);
            }
        }
        Command::RunAll { common, all_folds } => {
            let cfg = common.resolve()?;
            if all_folds {
                print_json(&harness::run_cross_validation(&cfg)?)?;
            } else {
                print_json(&harness::run_all(&cfg)?)?;
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<protoseg::Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli).context("protoseg failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
