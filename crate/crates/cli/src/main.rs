//! `pst` — experiment runner for the continual-learning engine.
//!
//! Three subcommands: `run` trains every seed of a config and writes
//! metrics/checkpoints; `report` compares finished runs; `plot` renders a
//! run's metrics as a self-contained SVG chart.
//!
//! Exit codes: 0 success, 1 configuration/input error, 2 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pst_core::commands::{cmd_plot, cmd_report, cmd_run, default_plot_path, OUT_ROOT_ENV};
use pst_core::plot::PlotKind;
use pst_core::{PstError, Result};

#[derive(Parser)]
#[command(
    name = "pst",
    about = "Continual-learning experiment runner",
    long_about = "Trains a stream of classification tasks under a chosen strategy \
                  (progressive segmented training, finetuning, or ablations), then \
                  reports and plots the results.\n\nOutput root precedence: --out, \
                  then the config's run.out_root, then $PST_OUT_ROOT, then ./runs.",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of a config; writes metrics, checkpoints, and the
    /// resolved config into <out-root>/<run-name>/.
    Run {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output root (overrides the config and $PST_OUT_ROOT).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the latest per-seed checkpoints instead of
        /// starting over.
        #[arg(long)]
        resume: bool,
    },
    /// Compare finished runs: accuracy per task count, delta vs the PST
    /// run, and FLOPs ratios vs a baseline.
    Report {
        /// Run directories (or any file inside them), one per run.
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// Baseline run (by run name or strategy name) for FLOPs ratios;
        /// defaults to the finetune run when present.
        #[arg(long)]
        baseline: Option<String>,
        /// Also write the table as CSV to this path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Render one chart of a run as a self-contained SVG.
    Plot {
        /// Chart kind: learning_curve, first_task, overall, or flops.
        #[arg(long, value_parser = PlotKind::parse)]
        kind: PlotKind,
        /// Run directory (or its metrics.csv / summary.csv).
        metrics: PathBuf,
        /// Output file; defaults to plot-<kind>.svg inside the run dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            resume,
        } => {
            let dir = cmd_run(&config, out.as_deref(), resume)?;
            println!("run complete: {}", dir.display());
            println!("  metrics:   {}", dir.join("metrics.csv").display());
            println!("  summaries: {}", dir.join("summary.csv").display());
            println!("  aggregate: {}", dir.join("aggregate.csv").display());
            Ok(())
        }
        Command::Report {
            metrics,
            baseline,
            csv,
        } => {
            let report = cmd_report(&metrics, baseline.as_deref())?;
            print!("{}", report.text);
            if let Some(path) = csv {
                std::fs::write(&path, report.csv)?;
                println!("csv written: {}", path.display());
            }
            Ok(())
        }
        Command::Plot { kind, metrics, out } => {
            let svg = cmd_plot(&metrics, kind)?;
            let path = out.unwrap_or_else(|| default_plot_path(&metrics, kind));
            std::fs::write(&path, svg)?;
            println!("plot written: {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    // Make clap's own usage errors exit with the config-error code.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 }; // --help/--version exit 0
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, PstError::Config(_)) {
                eprintln!("(set {OUT_ROOT_ENV} or --out to control where runs are written)");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
