//! Experiment harness for the DP federated learning simulator.

mod commands;
mod config;
mod manifest;

use anyhow::Result;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

/// Environment variable that sets the default output root directory.
pub const OUT_ROOT_ENV: &str = "DPFL_OUT_ROOT";

#[derive(Parser)]
#[command(name = "dpfl", version, about = "Differentially private federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to $DPFL_OUT_ROOT or ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for parallel work (0 = default).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Run one federated training and export per-round metrics.
    Train(CommonArgs),
    /// Run a grid of trainings over the configured epsilon/gamma axes.
    AttackSweep(CommonArgs),
    /// Train the Q-learning privacy agent and save its policy.
    RlTrain(CommonArgs),
    /// Replay a trained policy under the configured attack and flag rounds.
    Detect {
        #[command(flatten)]
        common: CommonArgs,
        /// Policy file produced by rl-train.
        #[arg(long)]
        policy: PathBuf,
    },
    /// Summarize a rounds.csv produced by train.
    Report {
        /// Metrics file to summarize.
        #[arg(long)]
        rounds: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => commands::train::run(&args),
        Command::AttackSweep(args) => commands::sweep::run(&args),
        Command::RlTrain(args) => commands::rl_train::run(&args),
        Command::Detect { common, policy } => commands::detect::run(&common, &policy),
        Command::Report { rounds } => commands::report::run(&rounds),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

impl CommonArgs {
    /// Resolve the output directory: --out, then $DPFL_OUT_ROOT, then ./runs.
    fn out_dir(&self) -> PathBuf {
        if let Some(out) = &self.out {
            return out.clone();
        }
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root),
            None => PathBuf::from("runs"),
        }
    }

    fn init_thread_pool(&self) -> Result<()> {
        if self.jobs > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(self.jobs)
                .build_global()?;
        }
        Ok(())
    }
}
