use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mocolab_cli::{exit_code, run_command, Command, RunConfig};
use mocolab_core::error::Result;
use mocolab_core::loss::BlockMask;
use mocolab_core::train::TrainMode;

#[derive(Parser)]
#[command(
    name = "mocolab",
    version,
    about = "Momentum-contrast SSL workbench with intermediate-layer losses and feature analysis"
)]
struct Cli {
    /// Path to the run configuration TOML.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the training mode (moco, moco+mse, moco+bt).
    #[arg(long, global = true)]
    mode: Option<String>,

    /// Override the intermediate-loss block mask, e.g. "1,2,3,4".
    #[arg(long, global = true)]
    block_mask: Option<String>,

    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Generate the synthetic dataset described by [synthetic].
    Generate {
        /// Target directory (default: a hash-named directory under the
        /// output root).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Self-supervised pretraining; writes logs, curves, and checkpoints.
    Pretrain,
    /// LL/E2E fine-tuning over the configured label fractions.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Restrict to a single label fraction.
        #[arg(long)]
        fraction: Option<f64>,
        /// Restrict to one fine-tune mode (ll or e2e).
        #[arg(long, value_name = "ll|e2e")]
        ft_mode: Option<String>,
    },
    /// Layer-wise linear probing of every block.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Per-block CKA between a pretrained checkpoint and a fine-tuned model.
    AnalyzeCka {
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        finetuned: PathBuf,
    },
    /// KS distances between fine-tuned models and the best 100% model.
    AnalyzeKs {
        /// Directory produced by `finetune`.
        #[arg(long)]
        run: PathBuf,
        /// Explicit reference model (default: best fraction-1.0 model).
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Consolidate a run directory into report.json (+ optional plots).
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &cli.mode {
        cfg.train.mode = TrainMode::parse(mode)?;
    }
    if let Some(mask) = &cli.block_mask {
        cfg.train.block_mask = BlockMask::parse(mask)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = build_config(&cli)?;
    let command = match &cli.command {
        Commands::Generate { out } => Command::Generate { out: out.clone() },
        Commands::Pretrain => Command::Pretrain,
        Commands::Finetune {
            checkpoint,
            fraction,
            ft_mode,
        } => {
            if let Some(f) = fraction {
                cfg.finetune.fractions = vec![*f];
            }
            if let Some(m) = ft_mode {
                cfg.finetune.modes = vec![mocolab_core::eval::FineTuneMode::parse(m)?];
            }
            Command::Finetune {
                checkpoint: checkpoint.clone(),
            }
        }
        Commands::Probe { checkpoint } => Command::Probe {
            checkpoint: checkpoint.clone(),
        },
        Commands::AnalyzeCka {
            pretrained,
            finetuned,
        } => Command::AnalyzeCka {
            pretrained: pretrained.clone(),
            finetuned: finetuned.clone(),
        },
        Commands::AnalyzeKs { run, reference } => Command::AnalyzeKs {
            run: run.clone(),
            reference: reference.clone(),
        },
        Commands::Report { run } => Command::Report { run: run.clone() },
    };
    let dir = run_command(&command, cfg)?;
    println!("run directory: {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
