//! `esmoe` — train, evaluate, benchmark, and inspect the sparse
//! mixture-of-experts block from the command line.
//!
//! All subcommands share one layered configuration (defaults, `--config`
//! file, flags; a flag always wins) and write artifacts under a run
//! directory named by the configuration hash and seed. Exit codes are a
//! stable contract: 0 success, 1 failed assertion or failed run, 2
//! configuration or usage error.

mod commands;
mod config;
mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::Overrides;

#[derive(Parser)]
#[command(
    name = "esmoe",
    version,
    about = "Sparse mixture-of-experts block: training, evaluation, and benchmarks",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic multi-scale task; writes the epoch-metrics
    /// CSV, a checkpoint, and per-expert routing heatmaps.
    Train {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate hard-routing accuracy, utilization, and entropy on
    /// held-out samples; asserts the expert-evaluation counter.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        /// Checkpoint to evaluate (default: freshly initialized model).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Held-out sample count (default: the configured n_val).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Time the expert stage sparse vs dense and append both rows to the
    /// benchmark CSV.
    Bench {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the finite-difference gradient suite; nonzero exit when the
    /// worst relative error exceeds 1e-3.
    Gradcheck {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Render per-expert routing-weight heatmap PGMs for a held-out batch.
    RouteViz {
        #[command(flatten)]
        overrides: Overrides,
        /// Checkpoint to visualize (default: freshly initialized model).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Held-out samples to route.
        #[arg(long, default_value_t = 64)]
        samples: usize,
        /// Square cell size per sample, in pixels.
        #[arg(long, default_value_t = 8)]
        cell: usize,
    },
    /// Generate the synthetic dataset and write it to a portable binary
    /// file.
    DatasetExport {
        #[command(flatten)]
        overrides: Overrides,
        /// Output file (default: dataset.bin in the run directory).
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Samples to export (default: n_train + n_val).
        #[arg(long)]
        count: Option<usize>,
    },
}

fn run(cli: &Cli) -> error::Result<()> {
    match &cli.command {
        Command::Train { overrides } => commands::cmd_train(overrides),
        Command::Eval { overrides, checkpoint, samples } => {
            commands::cmd_eval(overrides, checkpoint.as_ref(), *samples)
        }
        Command::Bench { overrides } => commands::cmd_bench(overrides),
        Command::Gradcheck { overrides } => commands::cmd_gradcheck(overrides),
        Command::RouteViz { overrides, checkpoint, samples, cell } => {
            commands::cmd_route_viz(overrides, checkpoint.as_ref(), *samples, *cell)
        }
        Command::DatasetExport { overrides, out, count } => {
            commands::cmd_dataset_export(overrides, out.as_ref(), *count)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
