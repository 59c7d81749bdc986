//! Batch front end for the control-over-noisy-links laboratory.
//!
//! Five subcommands cover the workflows: `bounds-curve` emits the
//! reliability/rate curve family for one erasure channel, `simulate` runs
//! a scenario file and writes traces and moment curves,
//! `reproduce-example` drives the two-mode differentiated-service pipeline
//! end to end and gates on its pinned tolerances, `rate-region` tests
//! (rate, exponent) target lists against the inner and outer region
//! bounds, and `necessity-roundtrip` embeds random bit streams into a
//! coupled block and checks recovery and error propagation.
//!
//! Every output file is a plain CSV with a one-line header, deterministic
//! given the inputs and seeds. Simulation trials run on a worker pool
//! sized by the `RAYON_NUM_THREADS` environment variable (all cores when
//! unset). Exit codes: 0 success, 1 a pinned tolerance failed, 2 bad
//! usage or configuration.

mod curves;
mod emit;
mod example;
mod region;
mod roundtrip;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// A command's unsuccessful outcome, split by exit code.
#[derive(Debug)]
pub(crate) enum Failure {
    /// Bad usage, unreadable or invalid configuration: exit 2.
    Config(String),
    /// The run completed but a pinned tolerance failed: exit 1.
    Tolerance(String),
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<anytime_control::simulator::SimulatorError> for Failure {
    fn from(e: anytime_control::simulator::SimulatorError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<anytime_control::bounds::BoundsError> for Failure {
    fn from(e: anytime_control::bounds::BoundsError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<anytime_control::embedding::EmbeddingError> for Failure {
    fn from(e: anytime_control::embedding::EmbeddingError) -> Self {
        Failure::Config(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "anytime-lab", version, about = "Bound curves, closed-loop simulation, and reproduction suites for control over erasure channels", long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emit the reliability/rate curve family for one erasure channel as
    /// CSV files: anytime capacity, sphere packing, the low-priority
    /// exponent against its rate, the rho sweep tracing that bound, and
    /// the eta-slope reference line.
    BoundsCurve {
        /// Erasure probability in [0, 1).
        #[arg(long)]
        beta: f64,
        /// High-priority rate the low-priority curves are conditioned on.
        #[arg(long)]
        rh: f64,
        /// Directory the CSV files are written into.
        #[arg(long)]
        out: PathBuf,
        /// Moment order for the slope reference line.
        #[arg(long, default_value_t = 3.0)]
        eta: f64,
        /// Samples per curve.
        #[arg(long, default_value_t = 512)]
        points: usize,
    },
    /// Run every trial of a scenario file and write traces, the moment
    /// curve, and a per-trial summary.
    Simulate {
        /// Scenario JSON file; unknown keys are rejected.
        #[arg(long)]
        config: PathBuf,
        /// Directory the CSV files are written into.
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario's trial count.
        #[arg(long)]
        trials: Option<u64>,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the two-mode differentiated-service pipeline: structural
    /// checks, demand computation, region verdicts, bound evaluations,
    /// and the paired simulation, gating on pinned tolerances.
    ReproduceExample {
        /// Directory the summary and simulation CSVs are written into.
        #[arg(long)]
        out: PathBuf,
        /// Override the shipped scenario's moment order.
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Test a list of (rate, exponent) targets against the inner
    /// (one code carries everything) and outer (prefix sums fit) region
    /// bounds of an erasure channel.
    RateRegion {
        /// JSON file with `beta` and a `targets` list of {rate, alpha}.
        #[arg(long)]
        config: PathBuf,
    },
    /// Embed random bit streams into an upper-triangular block, decode
    /// them back stream by stream, and check cross-stream error
    /// propagation against its certified bound.
    NecessityRoundtrip {
        /// JSON file describing the block, rate, bound, horizon, and seed.
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Tolerance(msg)) => {
            eprintln!("tolerance failure: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::BoundsCurve {
            beta,
            rh,
            out,
            eta,
            points,
        } => curves::bounds_curve(beta, rh, eta, points, &out),
        Command::Simulate {
            config,
            out,
            trials,
            seed,
        } => simulate::simulate(&config, &out, trials, seed),
        Command::ReproduceExample { out, eta } => example::reproduce_example(&out, eta),
        Command::RateRegion { config } => region::rate_region(&config),
        Command::NecessityRoundtrip { config } => roundtrip::necessity_roundtrip(&config),
    }
}
