use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::{EngineConfig, Invalid};

#[derive(Parser, Debug)]
#[command(
    name = "dosetwin",
    version,
    about = "Dose-surrogate digital twin for fractionated radiotherapy"
)]
struct Cli {
    /// TOML engine configuration.
    #[arg(long, global = true, env = "DOSETWIN_CONFIG")]
    config: Option<PathBuf>,

    /// Overrides the configured global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a jittered cohort of synthetic phantoms.
    Phantom(PhantomArgs),
    /// Fit the surrogate on a cohort directory.
    Train(TrainArgs),
    /// Predict doses, optionally with a dropout ensemble.
    Predict(PredictArgs),
    /// Dose and DVH scores of predictions against reference doses.
    Score(ScoreArgs),
    /// Run the closed-loop fractionated scenario.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    /// Output directory; one patient subdirectory per phantom.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of phantoms; defaults to `phantom.cohort_size`.
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    /// Output parameter file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss trajectory CSV; defaults to `losses.csv` next to the parameters.
    #[arg(long)]
    pub losses: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// A patient directory or a directory of patient directories.
    #[arg(long)]
    pub patients: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Ensemble size K of stochastic forward passes.
    #[arg(long)]
    pub stochastic: Option<usize>,
    /// Explicit dropout seeds, one per member.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// Predictions laid out as `<pred>/<patient>/dose.csv`.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Reference patient directories.
    #[arg(long = "reference")]
    pub reference: Option<PathBuf>,
    /// Score table CSV; defaults to `scores.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Output directory for logs and DVH bands.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Initial surrogate; fitted on a generated cohort when absent.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Overrides `scenario.n_fractions`.
    #[arg(long)]
    pub fractions: Option<usize>,
    /// Also write per-fraction wall-clock times.
    #[arg(long)]
    pub timing: bool,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = EngineConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Command::Simulate(SimulateArgs { fractions: Some(t), .. }) = &cli.command {
        cfg.scenario.n_fractions = *t;
    }
    cfg.validate()?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(config::invalid("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Phantom(a) => commands::phantom(&cfg, a),
        Command::Train(a) => commands::train(&cfg, a),
        Command::Predict(a) => commands::predict(&cfg, a),
        Command::Score(a) => commands::score(&cfg, a),
        Command::Simulate(a) => commands::simulate(&cfg, a),
    }
}

/// 2 for validation failures anywhere in the cause chain, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    use dosetwin_core::Error as E;
    let invalid = err.chain().any(|cause| {
        cause.downcast_ref::<Invalid>().is_some()
            || matches!(
                cause.downcast_ref::<E>(),
                Some(E::InvalidConfig(_) | E::InvalidAction { .. } | E::InvalidStep(_))
            )
    });
    if invalid {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
