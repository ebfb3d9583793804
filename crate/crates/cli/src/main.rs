//! Command-line front end for the FedEDS simulator.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fededs::format::{ParamsRecord, Record};
use fededs::nn::gradcheck::{run_suite, DEFAULT_STEP, DEFAULT_TOLERANCE};
use fededs::orchestrator::{
    metrics_to_csv, read_metrics_csv, rounds_to_target_report, run, write_metrics_csv, SimConfig,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(
    name = "fededs",
    version,
    about = "Federated learning with encrypted data sharing, simulated"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a simulation described by a key=value config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Metrics CSV destination; printed to stdout when omitted.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Write the final global model as a FEDS parameter record.
        #[arg(long)]
        global: Option<PathBuf>,
    },
    /// Rounds needed to reach each target accuracy.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        /// Comma-separated accuracies, e.g. 0.66,0.67.
        #[arg(long, value_delimiter = ',', required = true)]
        targets: Vec<f64>,
    },
    /// Finite-difference check of every training objective.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
}

/// Failure that is not a library error but still has a fixed exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            metrics,
            global,
        } => {
            let cfg = SimConfig::load(&config)?;
            let out = run(&cfg)?;
            match metrics {
                Some(path) => write_metrics_csv(&path, &out.metrics)?,
                None => print!("{}", metrics_to_csv(&out.metrics)),
            }
            if let Some(path) = global {
                ParamsRecord(out.global.trainable()).write_file(&path)?;
            }
            if let Some(last) = out.metrics.last() {
                eprintln!(
                    "{} {} rounds: final accuracy {:.4}, simulated {:.0}s",
                    cfg.method.name(),
                    last.round,
                    last.accuracy,
                    last.cum_seconds
                );
            }
        }
        Command::Report { metrics, targets } => {
            if let Some(bad) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
                return Err(Exit(EXIT_CONFIG, format!("target {bad} is outside [0, 1]")).into());
            }
            let rows = read_metrics_csv(&metrics)?;
            if rows.is_empty() {
                return Err(
                    Exit(EXIT_CONFIG, format!("{} has no rounds", metrics.display())).into(),
                );
            }
            print!("{}", rounds_to_target_report(&rows, &targets));
        }
        Command::Gradcheck { step, tolerance } => {
            if !(step > 0.0 && tolerance > 0.0) {
                return Err(Exit(EXIT_CONFIG, "step and tolerance must be positive".into()).into());
            }
            let reports = run_suite(step, tolerance).context("gradient check")?;
            let mut failed = 0;
            for r in &reports {
                println!(
                    "{:<28} params {:>3}  max rel err {:.3e}  {}",
                    r.name,
                    r.num_params,
                    r.max_relative_error,
                    if r.passed() { "ok" } else { "FAIL" }
                );
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(Exit(EXIT_NUMERIC, format!("{failed} gradient checks failed")).into());
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(Exit(code, _)) = err.downcast_ref::<Exit>() {
        return *code;
    }
    err.chain()
        .find_map(|e| e.downcast_ref::<fededs::Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
