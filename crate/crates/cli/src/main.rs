//! `rdiqkd`: key-rate certification, η scans, attack curves, simulation and
//! Gram-matrix construction.
//!
//! Exit status: 0 on success, 1 on a configuration error, 2 when the solver
//! fails to certify a bound.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Solver(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Solver(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Solver(m) => write!(f, "solver failure: {m}"),
        }
    }
}

impl From<rdiqkd::Error> for CliError {
    fn from(e: rdiqkd::Error) -> Self {
        match e {
            rdiqkd::Error::Solver { .. } | rdiqkd::Error::Numerical(_) => CliError::Solver(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "rdiqkd", version, about = "Key-rate bounds for receiver-device-independent QKD")]
struct Cli {
    /// Settings file with `[section]` headers and `key = value` lines;
    /// flags take precedence
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Protocol {
    /// Number of states and Bob settings
    #[arg(long)]
    pub n: Option<usize>,
    /// Qubit-ring angle in radians, or `optimize`
    #[arg(long)]
    pub theta: Option<config::ThetaArg>,
    /// Transmission
    #[arg(long)]
    pub eta: Option<f64>,
    /// Depolarizing fraction
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Gram matrix (exact or interval JSON) instead of the qubit ring
    #[arg(long, value_name = "FILE")]
    pub gram: Option<PathBuf>,
    /// Output file; stdout when absent
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Sdp {
    /// Relaxation level (1 or 2)
    #[arg(long)]
    pub level: Option<u8>,
    /// Duality-gap tolerance on the guessing probability
    #[arg(long)]
    pub gap_tol: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Certify a key rate at one operating point
    Keyrate {
        #[command(flatten)]
        protocol: Protocol,
        #[command(flatten)]
        sdp: Sdp,
        /// Print the JSON report instead of the text summary
        #[arg(long)]
        json: bool,
    },
    /// Key rate over a transmission grid, CSV output
    Scan {
        #[command(flatten)]
        protocol: Protocol,
        #[command(flatten)]
        sdp: Sdp,
        /// `start:stop:count` or a comma-separated list
        #[arg(long)]
        eta_grid: Option<config::Grid>,
        /// Worker threads
        #[arg(long)]
        jobs: Option<usize>,
        /// Coarse θ grid size for `--theta optimize`
        #[arg(long)]
        coarse: Option<usize>,
        /// Golden-section iterations for `--theta optimize`
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Intercept-resend attack guessing probabilities
    Attack {
        #[command(flatten)]
        protocol: Protocol,
        /// exclusion, usd or blinding
        #[arg(long)]
        kind: Option<String>,
        /// Constant real overlap for `usd`
        #[arg(long)]
        d: Option<f64>,
        #[arg(long)]
        eta_grid: Option<config::Grid>,
        #[arg(long)]
        json: bool,
    },
    /// Monte Carlo simulation of the sifted-key rounds
    Simulate {
        #[command(flatten)]
        protocol: Protocol,
        /// honest, exclusion or usd
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        rounds: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Independent RNG streams run in parallel
        #[arg(long)]
        shards: Option<usize>,
        /// Write one line per round
        #[arg(long, value_name = "FILE")]
        transcript: Option<PathBuf>,
        /// Honest click table from explicit qubit states
        #[arg(long)]
        state_vectors: bool,
        #[arg(long)]
        json: bool,
    },
    /// Write an exact, averaged or envelope Gram specification
    Gram {
        #[command(flatten)]
        protocol: Protocol,
        /// exact, average or envelope
        #[arg(long)]
        mode: Option<String>,
        /// Weighted Gram samples (JSON)
        #[arg(long, value_name = "FILE")]
        samples: Option<PathBuf>,
        #[arg(long)]
        theta_min: Option<f64>,
        #[arg(long)]
        theta_max: Option<f64>,
        /// Points of the θ range, endpoints included
        #[arg(long)]
        points: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = config::Settings::load(cli.config.as_deref()).and_then(|settings| match cli.command {
        Command::Keyrate { protocol, sdp, json } => commands::keyrate(&settings, protocol, sdp, json),
        Command::Scan {
            protocol,
            sdp,
            eta_grid,
            jobs,
            coarse,
            iterations,
        } => commands::scan(&settings, protocol, sdp, eta_grid, jobs, coarse, iterations),
        Command::Attack {
            protocol,
            kind,
            d,
            eta_grid,
            json,
        } => commands::attack(&settings, protocol, kind, d, eta_grid, json),
        Command::Simulate {
            protocol,
            strategy,
            rounds,
            seed,
            shards,
            transcript,
            state_vectors,
            json,
        } => commands::simulate(
            &settings,
            protocol,
            commands::SimulateArgs {
                strategy,
                rounds,
                seed,
                shards,
                transcript,
                state_vectors,
                json,
            },
        ),
        Command::Gram {
            protocol,
            mode,
            samples,
            theta_min,
            theta_max,
            points,
        } => commands::gram(&settings, protocol, mode, samples, theta_min, theta_max, points),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rdiqkd: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
