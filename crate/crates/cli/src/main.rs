mod commands;
mod config;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use lambdarc::pipeline::Mode;

use config::{ExperimentConfig, Overrides};

/// Learned rate control on a simulated codec.
#[derive(Debug, Parser)]
#[command(name = "lambdarc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Encode sequences per target and mode; write per-frame and summary CSVs.
    Simulate(Common),
    /// Train the controller; write weights and the training log.
    Train(Common),
    /// Summaries, BD-rate matrix and budget alignment over simulate outputs.
    Eval(Common),
    /// Compare reverse-pass gradients with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Maximum relative error per weight group.
        #[arg(long)]
        tolerance: Option<f64>,
        /// Test hook: perturb the analytic gradient of one weight group.
        #[arg(long, hide = true)]
        corrupt_group: Option<String>,
    },
    /// Sample the synthetic plant on a λ grid into a trace CSV.
    GenTrace(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single mode: fixed_lambda, pi_only or pi_gru.
    #[arg(long)]
    mode: Option<Mode>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn load(&self, tolerance: Option<f64>) -> Result<ExperimentConfig> {
        if let Some(jobs) = self.jobs {
            rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.max(1))
                .build_global()
                .context("starting worker pool")?;
        }
        let overrides = Overrides {
            seed: self.seed,
            out: self.out.clone(),
            mode: self.mode,
            tolerance,
        };
        ExperimentConfig::load(&self.config, &overrides)
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate(c) => commands::simulate(&c.load(None)?),
        Command::Train(c) => commands::train_cmd(&c.load(None)?),
        Command::Eval(c) => commands::eval(&c.load(None)?),
        Command::Gradcheck {
            common,
            tolerance,
            corrupt_group,
        } => commands::gradcheck(&common.load(tolerance)?, corrupt_group.as_deref()),
        Command::GenTrace(c) => commands::gen_trace(&c.load(None)?),
    }
}
