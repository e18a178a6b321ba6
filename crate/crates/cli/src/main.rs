//! `gyrocal`: simulate gyroscope logs, fit calibrators and score them.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use gyrocal::pipeline::ModelKind;
use gyrocal::Error;

/// Bad flags, a missing input or an unreadable config file.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

const OUTPUTS: &str = "\
Output files (all under --out-dir):
  simulate    gyro.csv, ref.csv, truth.csv, sim_config.json
  features    features.json
  fit-linear  scale_factors.csv, model.json
  train       model.json, history.json, features.json (when selection ran)
  calibrate   calibrated.csv
  evaluate    eval_report.json
  adev        adev.csv, noise.json
  report      comparison.csv, features.json (when selection ran) and per model
              {linear,gbrt,mlp}: model_<kind>.json, report_<kind>.json,
              calibrated_<kind>.csv, adev_<kind>.csv
Every command also writes run_config.json with the resolved configuration and
SHA-256 digests of its inputs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.";

#[derive(Debug, Parser)]
#[command(name = "gyrocal", version, about = "MEMS gyroscope calibration pipelines", after_help = OUTPUTS)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON configuration; flags override its fields.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory receiving every output file; created if missing.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Seed for the stochastic stages (simulate: profile and noise).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Gyro log CSV.
    #[arg(long, global = true, value_name = "FILE")]
    gyro: Option<PathBuf>,
    /// Reference rate CSV.
    #[arg(long, global = true, value_name = "FILE")]
    reference: Option<PathBuf>,
    /// Ground-truth rate CSV; selects the steady slice when given.
    #[arg(long, global = true, value_name = "FILE")]
    truth: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a rate profile and the matching gyro and reference logs.
    Simulate {
        /// Profile length in seconds.
        #[arg(long)]
        duration: Option<f64>,
        /// Use the controlled-rate staircase instead of a random profile.
        #[arg(long)]
        staircase: bool,
        /// Disable every noise and disturbance source.
        #[arg(long)]
        noise_free: bool,
        /// Multiply the zero-rate scale factor, for a second device.
        #[arg(long)]
        s0_scale: Option<f64>,
        /// Drive-sense mode split in hertz.
        #[arg(long)]
        mode_split: Option<f64>,
    },
    /// Correlation matrix, permutation importance and feature selection on
    /// the training split.
    Features,
    /// Per-segment scale factors and the constant-scale-factor model.
    FitLinear,
    /// Fit one calibrator on the training split.
    Train {
        #[arg(long)]
        model: Option<ModelKind>,
    },
    /// Apply a saved model to a gyro log.
    Calibrate {
        #[arg(long, value_name = "FILE")]
        model_file: Option<PathBuf>,
    },
    /// Score a `t,omega_hat` predictions file against the reference.
    Evaluate {
        #[arg(long, value_name = "FILE")]
        predictions: Option<PathBuf>,
        /// Label recorded in the report.
        #[arg(long)]
        model: Option<ModelKind>,
    },
    /// Allan deviation of one column of a CSV file.
    Adev {
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        #[arg(long, default_value = "omega_hat")]
        column: String,
        /// Hertz; inferred from the timestamps when omitted.
        #[arg(long)]
        sample_rate: Option<f64>,
    },
    /// Fit all three calibrators and compare them on the test split.
    Report {
        /// Gyro log of a second device whose test split is scored instead.
        #[arg(long, value_name = "FILE")]
        test_gyro: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        test_reference: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        test_truth: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidConfig(_)) => 1,
        Some(
            Error::DegenerateSegment
            | Error::ZeroVariance
            | Error::NoSlopeRegion
            | Error::InvalidDims(_)
            | Error::InvalidEps(_)
            | Error::TauTooLarge { .. }
            | Error::InvalidTau(_),
        ) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
