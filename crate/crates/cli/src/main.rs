use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fbsdelab::algebraic::AlgebraicError;
use fbsdelab::assumptions::AuditError;
use fbsdelab::bench::BenchError;
use fbsdelab::dpp::DppError;
use fbsdelab::fbsde::FbsdeError;
use fbsdelab::hjb::HjbError;
use fbsdelab::io::IoError;
use fbsdelab::viscosity::ViscosityError;

mod commands;
mod manifest;
mod settings;

/// Solvers and checks for controlled forward-backward SDEs.
#[derive(Debug, Parser)]
#[command(name = "fbsdelab", version)]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "FBSDELAB_OUT", default_value = "out")]
    out: PathBuf,
    /// Global seed; each module draws from its own substream.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Audit the structural assumptions of a problem.
    Check(CheckArgs),
    /// Solve the forward-backward system under one control and report J.
    Simulate(SimulateArgs),
    /// Solve the HJB equation by explicit finite differences.
    Hjb(HjbArgs),
    /// Value function by Monte Carlo dynamic programming.
    Dpp(DppArgs),
    /// Compare two surface CSVs.
    Compare(CompareArgs),
    /// Check the viscosity inequalities on a surface CSV.
    Viscosity(ViscosityArgs),
    /// Run every builtin through all solvers and print the acceptance table.
    Bench(BenchArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct CheckArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Sample points for the constant estimates.
    #[arg(long, default_value_t = 4096)]
    pub samples: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Constant control index, or a surface CSV whose maximizers are played
    /// as feedback.
    #[arg(long, default_value = "0")]
    pub control: String,
    /// Initial state, comma separated (default: origin).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Vec<f64>,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub t0: f64,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub paths: Option<usize>,
    /// Trajectories written to the dump.
    #[arg(long, default_value_t = 64)]
    pub dump: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct HjbArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Nodes per axis (overrides the config).
    #[arg(long)]
    pub nodes: Option<usize>,
    /// Time steps (default: from the CFL target).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Upwind the first-order term.
    #[arg(long)]
    pub upwind: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct DppArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Paths per node and control.
    #[arg(long)]
    pub paths: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    /// Optional; only recorded in the manifest.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ViscosityArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub surface: PathBuf,
    /// Fixed tolerance (default: 1e-6 times the surface scale).
    #[arg(long)]
    pub tol: Option<f64>,
    /// Tolerance from this multiple of the local truncation estimate.
    #[arg(long)]
    pub truncation: Option<f64>,
    #[arg(long, default_value_t = 20_000)]
    pub max_nodes: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    /// Smaller grids and ensembles.
    #[arg(long)]
    pub quick: bool,
    /// Paths per node and control for the dynamic programming solver.
    #[arg(long)]
    pub paths: Option<usize>,
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            kind: "validation",
            message: message.into(),
        }
    }

    fn convergence(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: "non_convergence",
            message: message.into(),
        }
    }
}

fn from_fbsde(e: &FbsdeError) -> bool {
    matches!(e, FbsdeError::NotConverged { .. })
}

impl From<FbsdeError> for CliError {
    fn from(e: FbsdeError) -> Self {
        if from_fbsde(&e) {
            Self::convergence(e.to_string())
        } else {
            Self::validation(e.to_string())
        }
    }
}

impl From<DppError> for CliError {
    fn from(e: DppError) -> Self {
        match &e {
            DppError::Solver { source, .. } | DppError::Fbsde(source) if from_fbsde(source) => {
                Self::convergence(e.to_string())
            }
            _ => Self::validation(e.to_string()),
        }
    }
}

impl From<HjbError> for CliError {
    fn from(e: HjbError) -> Self {
        match e {
            HjbError::NoContraction { .. } => Self::convergence(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

impl From<AuditError> for CliError {
    fn from(e: AuditError) -> Self {
        match &e {
            AuditError::NotContractive { .. } | AuditError::ProbeFailed { .. } => {
                Self::convergence(e.to_string())
            }
            AuditError::Fbsde(f) if from_fbsde(f) => Self::convergence(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

impl From<ViscosityError> for CliError {
    fn from(e: ViscosityError) -> Self {
        match &e {
            ViscosityError::Hjb(HjbError::NoContraction { .. })
            | ViscosityError::Algebraic {
                source: AlgebraicError::NoContraction { .. },
                ..
            } => Self::convergence(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Model(e) => Self::validation(e.to_string()),
            BenchError::Hjb(e) => e.into(),
            BenchError::Dpp(e) => e.into(),
            BenchError::Fbsde(e) => e.into(),
            BenchError::Audit(e) => e.into(),
            BenchError::Viscosity(e) => e.into(),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        Self {
            code: 1,
            kind: "io",
            message: e.to_string(),
        }
    }
}

fn args_json<T: Serialize>(args: &T) -> serde_json::Value {
    serde_json::to_value(args).unwrap_or(serde_json::Value::Null)
}

fn run(cli: &Cli) -> Result<i32, CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::validation(format!("--threads: {e}")))?;
    }
    let out: &Path = &cli.out;
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::validation(format!("cannot create {}: {e}", out.display())))?;
    let started = manifest::now_unix();
    let clock = Instant::now();
    let (name, arguments, result) = match &cli.command {
        Command::Check(a) => ("check", args_json(a), commands::check(a, out, cli.seed)),
        Command::Simulate(a) => (
            "simulate",
            args_json(a),
            commands::simulate(a, out, cli.seed),
        ),
        Command::Hjb(a) => ("hjb", args_json(a), commands::hjb(a, out)),
        Command::Dpp(a) => ("dpp", args_json(a), commands::dpp(a, out, cli.seed)),
        Command::Compare(a) => ("compare", args_json(a), commands::compare(a, out)),
        Command::Viscosity(a) => (
            "viscosity",
            args_json(a),
            commands::viscosity(a, out, cli.seed),
        ),
        Command::Bench(a) => ("bench", args_json(a), commands::bench(a, out, cli.seed)),
    };
    let outcome = result?;
    let mut outputs = outcome.outputs;
    outputs.sort();
    let m = manifest::RunManifest {
        subcommand: name.to_string(),
        config_hash: outcome.config_hash,
        seed: cli.seed,
        arguments,
        versions: manifest::Versions::current(),
        outputs,
        wall_clock: manifest::WallClock {
            started_unix: started,
            elapsed_seconds: clock.elapsed().as_secs_f64(),
        },
    };
    manifest::write(out, &m)?;
    Ok(outcome.status)
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: &'a str,
    exit_code: u8,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            let report = ErrorReport {
                error: e.kind,
                message: &e.message,
                exit_code: e.code,
            };
            eprintln!(
                "{}",
                serde_json::to_string(&report).unwrap_or_else(|_| e.message.clone())
            );
            ExitCode::from(e.code)
        }
    }
}
