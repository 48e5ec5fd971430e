use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use goco_cli::commands;

/// Deterministic simulator for gossip-based decentralized learning with
/// gradient coding: straggler-tolerant training runs, baseline comparisons,
/// and convergence-bound calculators, all emitting CSV telemetry.
#[derive(Parser)]
#[command(name = "goco", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Suppress progress output (errors still go to stderr).
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment config; one telemetry CSV and one
    /// metadata sidecar per seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides GOCO_OUT and the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's seed list, e.g. --seeds 1,2,3.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Like run, but seeds execute concurrently.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Run the ring, complete-graph, and ignore-stragglers configs and
    /// tabulate their losses on a common transmitted-bits grid.
    Compare {
        /// Config of the ring-topology method.
        #[arg(long)]
        ring: PathBuf,
        /// Config of the complete-graph baseline.
        #[arg(long)]
        complete: PathBuf,
        /// Config of the no-redundancy (ignore stragglers) baseline.
        #[arg(long = "is")]
        ignore_stragglers: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override every config's seed list, e.g. --seeds 1,2,3.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Number of points on the common bits grid.
        #[arg(long, default_value_t = 200)]
        grid_points: usize,
    },
    /// Evaluate the convergence-bound constants and envelope curve.
    Bound {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report the pair-wise balance of an assignment matrix file.
    Verify {
        /// Plain-text 0/1 assignment matrix.
        #[arg(long)]
        assignment: PathBuf,
        /// Write the report CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let quiet = cli.quiet;
    let result = match cli.command {
        Command::Run { config, out, seeds } => {
            commands::cmd_run(&config, out, seeds, quiet).map(|_| ())
        }
        Command::Sweep { config, out, seeds } => {
            commands::cmd_sweep(&config, out, seeds, quiet).map(|_| ())
        }
        Command::Compare {
            ring,
            complete,
            ignore_stragglers,
            out,
            seeds,
            grid_points,
        } => commands::cmd_compare(
            &ring,
            &complete,
            &ignore_stragglers,
            out,
            seeds,
            grid_points,
            quiet,
        )
        .map(|_| ()),
        Command::Bound { config, out } => commands::cmd_bound(&config, out, quiet).map(|_| ()),
        Command::Verify { assignment, out } => commands::cmd_verify(&assignment, out, quiet),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
