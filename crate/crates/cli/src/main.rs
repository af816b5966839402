//! `drestore render|bench|bias <config>`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use restore_core::config::ExperimentConfig;
use restore_core::experiment::{cmd_bench, cmd_bias, cmd_render, RunOptions};
use restore_core::Error;

#[derive(Parser, Debug)]
#[command(name = "drestore", version, about = "Diffusion Restore sampling engine and benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long, env = "DRESTORE_THREADS")]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, env = "DRESTORE_OUT")]
    out: Option<PathBuf>,
    /// Base seed, overriding `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render one image with the configured method.
    Render(Common),
    /// Convergence curves of several methods against a reference.
    Bench(Common),
    /// Discretization bias fields over a step-size sweep.
    Bias(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::Numeric(_) => 4,
        Error::Config(_) | Error::DimensionMismatch { .. } | Error::InvalidState(_) => 2,
    }
}

fn run(cli: Cli) -> Result<String, Error> {
    let (common, cmd): (&Common, fn(&ExperimentConfig, &RunOptions) -> restore_core::Result<String>) = match &cli.command {
        Command::Render(c) => (c, cmd_render),
        Command::Bench(c) => (c, cmd_bench),
        Command::Bias(c) => (c, cmd_bias),
    };
    let cfg = ExperimentConfig::load(&common.config)?;
    let opts = RunOptions::resolve(&cfg, common.threads, common.out.clone(), common.seed)?;
    cmd(&cfg, &opts)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{}", summary.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("drestore: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
