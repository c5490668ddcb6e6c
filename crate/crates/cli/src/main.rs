//! `curvequiv` command-line tool.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

const EXIT_CODES: &str = "Exit codes:
  0  success
  1  other failure (I/O, internal)
  2  invalid command line, config or schema violation
  3  data file missing, unparseable or inconsistent with the design
  4  a fit did not converge or the constrained fit was infeasible
  5  too many bootstrap replicates failed";

#[derive(Parser)]
#[command(name = "curvequiv", version, about = "Similarity tests for subgroup dose-response curves", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "CURVEQUIV_WORKERS")]
    workers: Option<usize>,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the seed of the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Maximum likelihood fit of every subgroup curve.
    Fit {
        #[command(flatten)]
        common: Common,
        /// `subgroup,dose,response` CSV.
        #[arg(long)]
        data: PathBuf,
    },
    /// Constrained bootstrap similarity test.
    Test {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// p-values over a grid of thresholds; writes CSV and a summary JSON.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Rejection rates of a simulation scenario.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Draws from the limit law of the scaled estimation error.
    Asymp {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Data(String),
    Core(curvequiv::Error),
    Other(String),
}

impl CliError {
    pub fn config(e: curvequiv::Error) -> Self {
        CliError::Config(e.to_string())
    }

    /// Failures while reading the data file; design problems stay config
    /// errors.
    pub fn data(path: &Path, e: curvequiv::Error) -> Self {
        use curvequiv::Error as E;
        match e {
            E::Design(_) | E::Model(_) | E::InvalidArgument(_) => CliError::Config(e.to_string()),
            other => CliError::Data(format!("{}: {other}", path.display())),
        }
    }

    fn exit_code(&self) -> u8 {
        use curvequiv::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Other(_) => 1,
            CliError::Core(e) => match e {
                E::Model(_) | E::Design(_) | E::InvalidArgument(_) => 2,
                E::Data { .. } | E::DegenerateDesign { .. } => 3,
                E::NonConvergence { .. }
                | E::ConstraintInfeasible { .. }
                | E::SingularInformation(_)
                | E::DegenerateCovariance(_) => 4,
                E::BootstrapFailure { .. } => 5,
                E::Io(_) => 1,
            },
        }
    }
}

impl From<curvequiv::Error> for CliError {
    fn from(e: curvequiv::Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

fn read_config(path: &Path) -> Result<config::RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    config::parse(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

type Action = fn(&commands::Inputs) -> Result<(), CliError>;

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, data, action): (&Common, Option<&Path>, Action) = match &cli.command {
        Command::Fit { common, data } => (common, Some(data), commands::fit),
        Command::Test { common, data } => (common, Some(data), commands::test),
        Command::Calibrate { common, data } => (common, Some(data), commands::calibrate),
        Command::Simulate { common } => (common, None, commands::simulate),
        Command::Asymp { common } => (common, None, commands::asymp),
    };
    if cli.workers == Some(0) {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    let config = read_config(&common.config)?;
    let inputs = commands::Inputs {
        config: &config,
        data,
        out: common.out.as_deref(),
        seed: common.seed,
    };
    curvequiv::with_workers(cli.workers, || action(&inputs))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("curvequiv: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
