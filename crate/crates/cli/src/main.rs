//! `funcreg`: data generation, training, and analysis runs from JSON configs.
//!
//! Logs go to standard error; every machine-readable output is a file.

mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::exit::Failure;

#[derive(Parser)]
#[command(name = "funcreg", version, about = "Function-space regularized robust fine-tuning")]
struct Cli {
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the benchmark splits as CSV files.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the encoder and prototype head on all classes.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a pretrained checkpoint on the ID split.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint stem written by `pretrain`.
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Four-space perturbation study of a fine-tuned checkpoint.
    Perturb {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// FT / FT+FAR / FT+FCR / FT+FAR+FCR over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated, e.g. `0,1,2`.
        #[arg(long)]
        seeds: String,
        /// Data directory; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pretrained checkpoint; trained from scratch when absent.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate weight interpolations between two checkpoints.
    Interpolate {
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        finetuned: PathBuf,
        #[arg(long, default_value = "0:1:0.1")]
        alphas: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect fine-tuning runs into one comparison table.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(text) = std::env::var("FUNCREG_THREADS") else {
        return Ok(());
    };
    let n: usize = text
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("FUNCREG_THREADS={text:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::GenData { spec, out } => commands::gen_data(&spec, &out),
        Command::Pretrain { config, data, out } => commands::cmd_pretrain(&config, &data, &out),
        Command::Finetune {
            config,
            data,
            pretrained,
            out,
        } => commands::cmd_finetune(&config, &data, &pretrained, &out),
        Command::Perturb { model, spec, data, out } => commands::cmd_perturb(&model, &spec, &data, &out),
        Command::Ablate {
            config,
            seeds,
            data,
            pretrained,
            out,
        } => {
            let seeds = commands::parse_seeds(&seeds)?;
            commands::cmd_ablate(&config, &seeds, data.as_deref(), pretrained.as_deref(), &out)
        }
        Command::Interpolate {
            pretrained,
            finetuned,
            alphas,
            data,
            out,
        } => commands::cmd_interpolate(&pretrained, &finetuned, &alphas, &data, &out),
        Command::Report { runs, out } => commands::cmd_report(&runs, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit::code_for(&e) as u8)
        }
    }
}
