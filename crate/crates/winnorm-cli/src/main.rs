//! Batch CLI for the normalization laboratory.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical
//! abort, 3 integrity error.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use winnorm::bench::{bench_windows, BenchMode};
use winnorm::error::Error;

#[derive(Parser)]
#[command(name = "winnorm", version, about = "Window-statistics normalization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the multi-site shape dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Comma-separated site names (subset of A-E).
        #[arg(long, value_delimiter = ',', default_values_t = ["A".to_string(), "B".to_string(), "C".to_string(), "D".to_string(), "E".to_string()])]
        sites: Vec<String>,
        #[arg(long, default_value_t = 500)]
        n_per_class: usize,
        #[arg(long, default_value_t = 125)]
        n_test_per_class: usize,
        /// Two-class (disk vs square) variant for the AUC pipeline.
        #[arg(long, default_value_t = false)]
        binary: bool,
    },
    /// Train one run from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dotted-path overrides, e.g. --override norm.kind=WIN
        #[arg(long = "override", value_name = "KEY=VAL")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on dataset splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated split (site) names.
        #[arg(long, value_delimiter = ',')]
        splits: Vec<String>,
        /// Also run the full corruption kind x severity grid.
        #[arg(long, default_value_t = false)]
        corruptions: bool,
        /// Reference eval summary (metrics.json) for AUC recalibration.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Output directory (defaults to CHECKPOINT/eval).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a method x seed comparison grid.
    Compare {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        /// Parallel worker processes for grid cells.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Time online vs offline window-parameter generation.
    BenchWindows {
        #[arg(long, value_parser = parse_mode, default_value = "both")]
        mode: BenchMode,
        #[arg(long)]
        steps: usize,
        /// Timed epochs per mode (median is reported).
        #[arg(long, default_value_t = 15)]
        epochs: usize,
        #[arg(long, default_value_t = 0.7)]
        tau: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Write the JSON report here as well as stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> Result<BenchMode, String> {
    match s {
        "online" => Ok(BenchMode::Online),
        "offline" => Ok(BenchMode::Offline),
        "both" => Ok(BenchMode::Both),
        other => Err(format!("unknown mode {other}; use online, offline or both")),
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NumericalAbort { .. } | Error::DegenerateInput { .. } | Error::NonScalarLoss(_) => 2,
        Error::Integrity(_) | Error::Io { .. } => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    // Cap intra-run parallelism when requested.
    if let Ok(threads) = std::env::var("WINNORM_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }

    match cli.command {
        Command::GenData { out, seed, sites, n_per_class, n_test_per_class, binary } => {
            commands::cmd_gen_data(&out, seed, &sites, n_per_class, n_test_per_class, binary)
        }
        Command::Train { config, overrides } => {
            let cfg = config::load_run_config(&config, &overrides)?;
            let summary = commands::cmd_train(&cfg)?;
            println!(
                "{}: ind {:.4}, mean ood {:.4} in {:.1}s -> {}",
                summary.run_id,
                summary.final_epoch.ind_accuracy,
                summary.mean_ood_accuracy.unwrap_or(f64::NAN),
                summary.wall_secs,
                cfg.out.display(),
            );
            Ok(())
        }
        Command::Eval { checkpoint, data, splits, corruptions, reference, out } => {
            if splits.is_empty() {
                return Err(Error::InvalidConfig("--splits must name at least one site".into()));
            }
            let out = out.unwrap_or_else(|| checkpoint.join("eval"));
            let report = commands::cmd_eval(
                &checkpoint,
                &data,
                &splits,
                corruptions,
                reference.as_deref(),
                &out,
            )?;
            for row in &report.rows {
                println!("{}\t{}\t{:.4}", row.metric, row.dataset, row.value);
            }
            Ok(())
        }
        Command::Compare { matrix, seeds, out, jobs } => {
            let summary = commands::cmd_compare(&matrix, seeds, &out, jobs)?;
            let failed: Vec<&commands::CompareCell> =
                summary.cells.iter().filter(|c| c.status != "ok").collect();
            for cell in &summary.cells {
                println!("{}_s{}: {}", cell.method, cell.seed, cell.status);
            }
            println!("summary: {}", out.join("summary.csv").display());
            if !failed.is_empty() {
                return Err(Error::InvalidConfig(format!("{} cells failed", failed.len())));
            }
            Ok(())
        }
        Command::BenchWindows { mode, steps, epochs, tau, seed, out } => {
            let dims = [(16, 16), (8, 8), (4, 4)];
            let report = bench_windows(mode, steps, epochs, &dims, tau, seed)?;
            let body = serde_json::to_string_pretty(&report)?;
            println!("{body}");
            if let Some(path) = out {
                std::fs::write(&path, &body).map_err(|e| Error::io(path.display().to_string(), e))?;
            }
            Ok(())
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version print and exit 0; real usage errors exit 1.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
