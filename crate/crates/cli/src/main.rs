//! `gapnet` — train and evaluate jointly-learned stock-relation graphs from
//! the command line. Every subcommand is deterministic for a fixed config
//! and seed. Exit codes: 0 success, 2 configuration problems, 3 data or
//! file problems, 4 numeric failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod artifacts;
mod commands;

#[derive(Parser)]
#[command(
    name = "gapnet",
    version,
    about = "Stock-relation graph learning: data prep, priors, training, backtests",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic price panel with planted cluster structure.
    ///
    /// Writes one `<ticker>.csv` per stock, `tickers.txt`, and
    /// `clusters.csv` (the ground-truth ticker,sector membership).
    SynthData {
        /// Number of stocks; must be divisible by --clusters.
        #[arg(long)]
        stocks: usize,
        /// Trading days to generate.
        #[arg(long)]
        days: usize,
        /// Number of planted clusters.
        #[arg(long)]
        clusters: usize,
        /// Idiosyncratic noise level on top of the cluster factor.
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
        /// Generator seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },

    /// Build the prior graph described by the config's `prior` section.
    BuildGraph {
        /// Run configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output path for the member-list graph file.
        #[arg(long)]
        out: PathBuf,
    },

    /// Train a model and write checkpoint, epoch log, and resolved config.
    Train {
        /// Run configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoint.bin, epochs.csv, resolved.json.
        #[arg(long)]
        out: PathBuf,
    },

    /// Score every day of a split segment with a trained checkpoint.
    Evaluate {
        /// Run configuration (JSON); must match the checkpoint.
        #[arg(long)]
        config: PathBuf,
        /// Trained parameters from `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which chronological segment to score.
        #[arg(long, value_parser = ["train", "valid", "test"], default_value = "test")]
        segment: String,
        /// Output predictions CSV (rows are days, columns are tickers).
        #[arg(long)]
        out: PathBuf,
    },

    /// Simulate a daily top-k portfolio from a predictions file.
    Backtest {
        /// Predictions CSV produced by `evaluate`.
        #[arg(long)]
        preds: PathBuf,
        /// Directory of per-ticker price CSVs with a tickers.txt listing.
        #[arg(long)]
        panel: PathBuf,
        /// Stocks held per day.
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Initial capital.
        #[arg(long, default_value_t = 10000.0)]
        capital: f64,
        /// Portfolio return: `mean` (equal weight) or `sum` (literal sum).
        #[arg(long, value_parser = ["mean", "sum"], default_value = "mean")]
        return_mode: String,
        /// Information coefficient: `spearman` or `pearson`.
        #[arg(long, value_parser = ["spearman", "pearson"], default_value = "spearman")]
        ic_mode: String,
        /// Output directory for ledger.csv and summary.json.
        #[arg(long)]
        out: PathBuf,
        /// Also write a date,wealth curve CSV to this path.
        #[arg(long)]
        emit_curve: Option<PathBuf>,
        /// Benchmark series CSV (date,value) to add to the curve.
        #[arg(long)]
        benchmark: Option<PathBuf>,
    },

    /// Serialize the realized graph of one trading day.
    ///
    /// Writes `<out>.graph.txt` (member-list structure) and
    /// `<out>.attrs.csv` (the masked attribute values behind it).
    DumpGraph {
        /// Run configuration (JSON); must match the checkpoint.
        #[arg(long)]
        config: PathBuf,
        /// Trained parameters from `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Trading day to realize, ISO format (YYYY-MM-DD).
        #[arg(long)]
        date: String,
        /// Output path prefix.
        #[arg(long)]
        out: PathBuf,
    },

    /// Audit every gradient against central finite differences.
    Gradcheck {
        /// Seed for the probe inputs and parameters.
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },

    /// Train-and-backtest every prior type against every model variant.
    ///
    /// Emits a `component,initialization,IRR,SR` comparison CSV covering
    /// the full model, the recurrence-free variant, and the fixed-graph
    /// paradigm for industry, DTW, and random priors.
    Ablate {
        /// Run configuration (JSON); supplies panel, model, and training keys.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for ablate.csv and resolved.json.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    if let Ok(raw) = std::env::var("GAPNET_THREADS") {
        let threads: usize = match raw.parse() {
            Ok(n) if n > 0 => n,
            _ => {
                eprintln!("error: GAPNET_THREADS must be a positive integer, got {raw:?}");
                return ExitCode::from(2);
            }
        };
        // First configuration wins; this runs before any pool use.
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .expect("global thread pool configured twice");
    }

    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
