//! `qlvm`: train, evaluate and analyze lattice latent variable models.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::Result;
use crate::output::write_all;

#[derive(Parser)]
#[command(name = "qlvm", version, about = "Quasi-Monte Carlo latent variable models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. --set lattice=fib:10.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; created if missing and locked while the command runs.
    #[arg(long, short = 'o')]
    out: PathBuf,
}

#[derive(Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Trained model; its stored config provides the defaults.
    #[arg(long, short = 'c')]
    checkpoint: PathBuf,
    /// Overrides the seed used for evaluation noise and sampling.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a qlvm, vae or iwae model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        /// Resume from this checkpoint and train up to `epochs`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Held-out bounds of a checkpoint on the test split.
    Evaluate(WithCheckpoint),
    /// Train once per value of sweep.values and tabulate cost and test objective.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-datum posterior means and modes.
    Embed(WithCheckpoint),
    /// Aggregate posterior density over the analysis lattice.
    Density(WithCheckpoint),
    /// Mean-shift clusters of the aggregate posterior.
    Cluster(WithCheckpoint),
    /// Decoder Jacobian Frobenius norms, raw and smoothed.
    Jacobian(WithCheckpoint),
    /// Density-weighted shortest path between two latent points or centroids.
    Geodesic(WithCheckpoint),
    /// Decoded frames along a straight line on the torus.
    Traverse(WithCheckpoint),
    /// Decoded draws from the prior.
    Sample(WithCheckpoint),
}

fn run(cli: Cli) -> Result<()> {
    use commands::*;
    let (common, outputs) = match cli.command {
        Command::Train { common, seed, resume } => {
            let ck = resume.as_deref().map(read_checkpoint).transpose()?;
            let s = config::resolve(ck.as_ref().map(|c| &c.config), common.config.as_deref(), &common.set, Some(seed))?;
            let out = train(&s, ck.as_ref())?;
            (common, out)
        }
        Command::Sweep { common, seed } => {
            let s = config::resolve(None, common.config.as_deref(), &common.set, seed)?;
            let out = sweep(&s)?;
            (common, out)
        }
        Command::Evaluate(a) => with_checkpoint(a, evaluate)?,
        Command::Embed(a) => with_checkpoint(a, embed_cmd)?,
        Command::Density(a) => with_checkpoint(a, density)?,
        Command::Cluster(a) => with_checkpoint(a, cluster)?,
        Command::Jacobian(a) => with_checkpoint(a, jacobian)?,
        Command::Geodesic(a) => with_checkpoint(a, geodesic_cmd)?,
        Command::Traverse(a) => with_checkpoint(a, traverse)?,
        Command::Sample(a) => with_checkpoint(a, sample)?,
    };
    write_all(&common.out, &outputs)
}

type Handler = fn(&config::Settings, &qlvm_core::data::Checkpoint) -> Result<output::Outputs>;

fn with_checkpoint(a: WithCheckpoint, f: Handler) -> Result<(Common, output::Outputs)> {
    let ck = commands::read_checkpoint(&a.checkpoint)?;
    let s = config::resolve(Some(&ck.config), a.common.config.as_deref(), &a.common.set, a.seed)?;
    let out = f(&s, &ck)?;
    Ok((a.common, out))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
