mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::output::Format;

#[derive(Parser, Debug)]
#[command(name = "cloudlet-lb", version, about = "Load balancing across federated cloudlets")]
pub struct Cli {
    /// Seed for every random draw the command makes.
    #[arg(long, global = true, default_value_t = 7)]
    pub seed: u64,
    /// Write the result here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArg {
    /// Federation config (JSON).
    #[arg(long, short)]
    pub config: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct SolverArgs {
    /// Initial damping of the best-response iteration.
    #[arg(long, default_value_t = 0.1)]
    pub step: f64,
    /// KKT residual at which the solver stops.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 10_000)]
    pub max_iters: usize,
}

#[derive(Args, Debug, Clone)]
pub struct LearningArgs {
    #[arg(long, default_value_t = 0.9)]
    pub theta: f64,
    #[arg(long, default_value_t = 0.01)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1000)]
    pub bins: usize,
    #[arg(long, default_value_t = 500)]
    pub iterations: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    /// Every cloudlet keeps its own jobs.
    Identity,
    /// Slicing plus equilibrium solved each interval.
    Centralized,
    /// Learned strategies each interval.
    Carla,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    /// Arrival rate of one (cloudlet, class) or of every cloudlet.
    Rate,
    /// Learning accuracy over a Θ × σ grid.
    ThetaSigma,
    /// Learning accuracy against stationarity time.
    Stationarity,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Split each cloudlet's servers across job classes.
    Slice(ConfigArg),
    /// Solve the offloading equilibrium.
    SolveNe {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        solver: SolverArgs,
        /// Also run the unilateral-deviation certificate.
        #[arg(long)]
        verify: bool,
        #[arg(long, default_value_t = 0.005)]
        grid_step: f64,
        /// Largest tolerated relative deviation gain.
        #[arg(long, default_value_t = 1e-3)]
        slack: f64,
    },
    /// Check the price conditions the mediator relies on.
    CheckPrices(ConfigArg),
    /// Try misreported rates and compare realized utilities.
    AuditMechanism {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        solver: SolverArgs,
        /// Misreport multiples of the true rate.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Learn offload strategies without a mediator.
    Learn {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        learning: LearningArgs,
        /// Write the final densities as CSV here.
        #[arg(long)]
        density_out: Option<PathBuf>,
    },
    /// Event-driven simulation under the timeslot protocol.
    Simulate {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        solver: SolverArgs,
        #[command(flatten)]
        learning: LearningArgs,
        /// Simulated seconds; defaults to ten planning intervals.
        #[arg(long)]
        duration: Option<f64>,
        /// Replay this trace instead of drawing Poisson arrivals.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PolicyKind::Centralized)]
        policy: PolicyKind,
        /// `oracle` or `window:K`.
        #[arg(long, default_value = "oracle")]
        predictor: String,
        /// Keep jobs past their marking instead of dropping them.
        #[arg(long)]
        no_deadlines: bool,
    },
    /// Repeat a solve or learning run over a parameter grid.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        solver: SolverArgs,
        #[command(flatten)]
        learning: LearningArgs,
        #[arg(long, value_enum)]
        over: SweepKind,
        /// Rate sweeps: `all` or `CLOUDLET:CLASS`.
        #[arg(long, default_value = "all")]
        target: String,
        #[arg(long)]
        from: Option<f64>,
        #[arg(long)]
        to: Option<f64>,
        #[arg(long, default_value_t = 11)]
        steps: usize,
        #[arg(long, value_delimiter = ',', default_value = "0.9")]
        thetas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.01")]
        sigmas: Vec<f64>,
        /// Stationarity times in seconds.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        stationarity: Vec<f64>,
    },
    /// Draw Poisson arrivals at the configured rates.
    GenTrace {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        duration: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
