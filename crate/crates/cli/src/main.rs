//! `vesselmae`: synthetic data, pre-training, fine-tuning, inference,
//! evaluation and ablations from one experiment configuration.
//!
//! Every configuration key can be overridden from the environment as
//! `VMAE_<SECTION>_<KEY>` (e.g. `VMAE_PRETRAIN_EPOCHS=2`) or `VMAE_<KEY>` for
//! top-level keys (e.g. `VMAE_SEED=3`). Flags win over the environment,
//! which wins over the file.

mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "vesselmae", version, about = "Artery-guided masked autoencoder lesion detection")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true, env = "VMAE_CONFIG")]
    config: Option<PathBuf>,
    /// Experiment seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Threads for per-case inference.
    #[arg(long, global = true, default_value_t = 1, env = "VMAE_WORKERS")]
    workers: usize,
    /// Overwrite existing dataset folders.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with train/test manifests.
    Synth {
        #[arg(long)]
        n_cases: usize,
        /// Output folder (defaults to `paths.data_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Masked-autoencoder pre-training.
    Pretrain {
        /// Training manifest (defaults to `<data_dir>/train.txt`).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detection fine-tuning, from a pre-trained encoder or from scratch.
    Finetune {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pre-training checkpoint; omit to train from scratch.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Whole-volume inference; writes `predictions.json`.
    Infer {
        /// Manifest of cases to predict (defaults to `<data_dir>/test.txt`).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FROC, Se@FPr, patient metrics and size strata for one or more
    /// prediction sets, with pairwise permutation tests.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long = "predictions", required = true, num_args = 1..)]
        predictions: Vec<PathBuf>,
        /// One label per predictions file.
        #[arg(long = "label")]
        labels: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains and evaluates the ablation variants A, D, E, F, G.
    Ablate {
        /// Run only `ablation.reduced_variants`.
        #[arg(long)]
        reduced: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let cfg: ExperimentConfig = config::load(cli.config.as_deref(), cli.seed, std::env::vars())?;
    let work = |sub: &str, out: Option<PathBuf>| out.unwrap_or_else(|| cfg.paths.work_dir.join(sub));
    match cli.command {
        Command::Synth { n_cases, out } => {
            let out = out.unwrap_or_else(|| cfg.paths.data_dir.clone());
            commands::synth(&cfg, n_cases, &out, cli.force)?;
        }
        Command::Pretrain { data, out } => {
            let data = data.unwrap_or_else(|| commands::train_manifest(&cfg));
            commands::run_pretrain(&cfg, &data, &work("pretrain", out))?;
        }
        Command::Finetune { data, pretrained, out } => {
            let data = data.unwrap_or_else(|| commands::train_manifest(&cfg));
            commands::run_finetune(&cfg, &data, pretrained.as_deref(), &work("finetune", out))?;
        }
        Command::Infer { data, checkpoint, out } => {
            let data = data.unwrap_or_else(|| commands::test_manifest(&cfg));
            commands::run_infer(&cfg, &data, &checkpoint, &work("infer", out), cli.workers)?;
        }
        Command::Eval {
            data,
            predictions,
            labels,
            out,
        } => {
            let data = data.unwrap_or_else(|| commands::test_manifest(&cfg));
            for r in commands::run_eval(&cfg, &data, &predictions, &labels, &work("eval", out))? {
                println!("se@fpr{} = {:.4}", r.fpr_budget, r.se_at_budget);
            }
        }
        Command::Ablate { reduced, out } => {
            for (v, r) in commands::run_ablate(&cfg, &work("ablate", out), reduced, cli.workers)? {
                println!("{}: se@fpr{} = {:.4}", v.name, r.fpr_budget, r.se_at_budget);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("VMAE_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
