//! `grr`: generate canonical data, solve poses, check gradients, run noise
//! ablations and evaluate losses.
//!
//! Exit codes: 0 success, 1 check failure, 2 degenerate input, 3 I/O or
//! configuration error.

mod commands;
mod config;
mod repsets;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Outcome;
use crate::config::{GradOpName, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "grr",
    version,
    about = "Pose recovery from ray and point representations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 picks automatically.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    op: Option<OpArg>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    h: Option<f64>,
    /// Use a collinear (degenerate) instance.
    #[arg(long)]
    degenerate: bool,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum OpArg {
    Rotation,
    Rigid,
    LossTotal,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write canonical rays/points and ground-truth (and optionally noisy) world representations.
    Gen(Common),
    /// Recover poses from a predicted representation set.
    Solve(Common),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Run the noise ablation sweep.
    Ablate(Common),
    /// Evaluate the loss stack on predictions.
    Loss(Common),
}

fn load(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.threads > 0 {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(common.threads)
            .build_global();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    match cli.command {
        Command::Gen(c) => {
            let cfg = load(&c)?;
            commands::gen::run(&cfg, &cfg.output_dir(c.out.as_deref()))
        }
        Command::Solve(c) => {
            let cfg = load(&c)?;
            commands::solve::run(&cfg, &cfg.output_dir(c.out.as_deref()))
        }
        Command::Gradcheck(g) => {
            let mut cfg = load(&g.common)?;
            if let Some(op) = g.op {
                cfg.gradcheck.op = match op {
                    OpArg::Rotation => GradOpName::Rotation,
                    OpArg::Rigid => GradOpName::Rigid,
                    OpArg::LossTotal => GradOpName::LossTotal,
                };
            }
            if let Some(t) = g.threshold {
                cfg.gradcheck.threshold = t;
            }
            if let Some(h) = g.h {
                cfg.gradcheck.h = h;
            }
            cfg.gradcheck.degenerate |= g.degenerate;
            commands::gradcheck::run(&cfg)
        }
        Command::Ablate(c) => {
            let cfg = load(&c)?;
            commands::ablate::run(&cfg, &cfg.output_dir(c.out.as_deref()))
        }
        Command::Loss(c) => {
            let cfg = load(&c)?;
            commands::loss::run(&cfg, &cfg.output_dir(c.out.as_deref()))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRR_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(outcome) => outcome.exit_code(),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
