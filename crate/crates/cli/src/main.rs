mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hostcap::hca::HcaMode;
use hostcap::DerKind;

/// Hosting-capacity studies for radial distribution feeders.
#[derive(Debug, Parser)]
#[command(name = "hostcap", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Opts,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a network file or a scenario directory.
    Validate {
        /// Network JSON, `builtin:<name>`, or a scenario directory.
        path: String,
    },
    /// Deterministic iterative hosting capacity on the baseline scenario.
    HcaDet,
    /// Iterative hosting capacity on every scenario, with its distribution.
    HcaStoch,
    /// Two-stage stochastic siting and sizing.
    Ssp,
    /// BS × HP sensitivity sweep of the maximum PV penetration.
    Sweep,
    /// Correlations, volume ratio and spread comparison from earlier outputs.
    Report {
        /// Directory holding earlier outputs.
        dir: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Target {
    Pv,
    Hp,
    Ev,
}

impl From<Target> for DerKind {
    fn from(t: Target) -> Self {
        match t {
            Target::Pv => DerKind::Pv,
            Target::Hp => DerKind::Hp,
            Target::Ev => DerKind::Ev,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Static,
    Dynamic,
}

impl From<Mode> for HcaMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Static => HcaMode::Static,
            Mode::Dynamic => HcaMode::Dynamic,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Opts {
    /// Run configuration (JSON); flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Network JSON or `builtin:two-bus|feeder-4|feeder-123`.
    #[arg(long, global = true)]
    pub network: Option<String>,
    /// Scenario directory.
    #[arg(long, global = true)]
    pub scenarios: Option<PathBuf>,
    #[arg(long, value_enum, global = true)]
    pub target: Option<Target>,
    #[arg(long, value_enum, global = true)]
    pub mode: Option<Mode>,
    /// Penetration step (percentage points).
    #[arg(long, global = true)]
    pub step: Option<f64>,
    /// Battery budget (% of total nominal load).
    #[arg(long = "bs-budget", global = true)]
    pub bs_budget: Option<f64>,
    /// Solve a k-scenario reduction first, then warm-start the full set.
    #[arg(long, global = true)]
    pub reduce: Option<usize>,
    /// Feasibility rate (%) at which the reduced solution is accepted.
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = "HOSTCAP_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, global = true, env = "HOSTCAP_OUT")]
    pub out: Option<PathBuf>,
    /// Write the assembled conic program as text.
    #[arg(long = "dump-model", global = true)]
    pub dump_model: bool,
    /// Write objective breakdowns.
    #[arg(long, global = true)]
    pub breakdown: bool,
}

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Done,
    Infeasible,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run::execute(&cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Infeasible) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
