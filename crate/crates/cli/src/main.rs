//! `rmd`: synthetic data, retrieval index, denoiser and evaluator training,
//! condition-mixture search, sampling, and evaluation.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or
//! dependency error, 4 numeric failure.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// A configuration or command-line problem (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Debug, Parser)]
#[command(name = "rmd", version, about = "Retrieval-augmented text-to-motion diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the procedural train/test dataset.
    GenSynthetic {
        #[arg(long)]
        config: PathBuf,
        /// Dataset root (defaults to `dataset` from the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Embed training captions into a retrieval index.
    BuildIndex {
        #[arg(long)]
        config: PathBuf,
        /// Length-kernel weight (defaults to `lambda` from the config).
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the denoiser.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the contrastive text–motion evaluator.
    TrainEvaluator {
        #[arg(long)]
        config: PathBuf,
    },
    /// Grid-search the mixture weights, then finetune them on the last steps.
    MixtureSearch {
        #[arg(long)]
        config: PathBuf,
        /// Replace FID with a quadratic whose minimum is at W1,W2.
        #[arg(long, value_name = "W1,W2", allow_hyphen_values = true)]
        surrogate_optimum: Option<String>,
    },
    /// Generate one motion for a prompt.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Number of frames.
        #[arg(long)]
        length: usize,
        /// Respaced sampling steps (defaults to `schedule.n_infer`).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Mixture weights `w1,w2,w3,w4` (default `1,0,0,0`).
        #[arg(long, allow_hyphen_values = true)]
        weights: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate for every test prompt and compute the metric report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        weights: Option<String>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenSynthetic { config, out } => commands::gen_synthetic(&config::load(&config)?, out),
        Command::BuildIndex { config, lambda, out } => {
            commands::build_index_cmd(&config::load(&config)?, lambda, out)
        }
        Command::Train { config } => commands::train_cmd(&config::load(&config)?),
        Command::TrainEvaluator { config } => commands::train_evaluator_cmd(&config::load(&config)?),
        Command::MixtureSearch {
            config,
            surrogate_optimum,
        } => commands::mixture_search_cmd(&config::load(&config)?, surrogate_optimum.as_deref()),
        Command::Sample {
            config,
            prompt,
            length,
            steps,
            seed,
            weights,
            out,
        } => commands::sample_cmd(
            &config::load(&config)?,
            commands::SampleArgs {
                prompt,
                length,
                steps,
                seed,
                weights,
                out,
            },
        ),
        Command::Eval { config, weights } => commands::eval_cmd(&config::load(&config)?, weights.as_deref()),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<rmd_core::Error>() {
            return match e {
                rmd_core::Error::Contract(_) => 2,
                rmd_core::Error::Numeric(_) | rmd_core::Error::Tensor(_) => 4,
                _ => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
