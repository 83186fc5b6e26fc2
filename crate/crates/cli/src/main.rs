use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use rfga_cli::commands;
use rfga_cli::ExperimentConfig;
use rfga_core::backbone::Variant;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "rfga", version, about = "Triple-view attention WSOL experiments on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file (sections with key = value lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed (`gen`: dataset seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model variant.
    #[arg(long)]
    variant: Option<Variant>,
    /// Upsample CAMs bilinearly instead of nearest-neighbour.
    #[arg(long)]
    bilinear: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        force: bool,
    },
    /// Train one variant, writing per-epoch checkpoints and a CSV log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        force: bool,
    },
    /// Localization report and top-1 for a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Accuracy-vs-threshold curves for every trained variant.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Attention and CAM panels for test samples.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Test sample ids; defaults to the config's list.
        ids: Vec<usize>,
    },
}

fn load(common: &Common, seed_is_data: bool) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        if seed_is_data {
            cfg.data.seed = seed;
        } else {
            cfg.train.seed = seed;
        }
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(v) = common.variant {
        cfg.variant = v;
    }
    cfg.bilinear |= common.bilinear;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, force } => {
            let m = commands::cmd_gen(&load(&common, true)?, force)?;
            print!("{}", m.to_text());
        }
        Command::Train { common, force } => {
            let out = commands::cmd_train(&load(&common, false)?, force)?;
            println!("wrote {}", out.run_dir.display());
        }
        Command::Eval { common, checkpoint } => {
            commands::cmd_eval(&load(&common, false)?, checkpoint.as_deref())?;
        }
        Command::Sweep { common } => {
            commands::cmd_sweep(&load(&common, false)?)?;
        }
        Command::Visualize {
            common,
            checkpoint,
            ids,
        } => {
            let cfg = load(&common, false)?;
            let ids = if ids.is_empty() {
                cfg.visualize_samples.clone()
            } else {
                ids
            };
            commands::cmd_visualize(&cfg, checkpoint.as_deref(), &ids)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
