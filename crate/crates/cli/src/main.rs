//! `bec`: batch driver for the stationary, homogenization and evolution solvers.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Parser, Debug)]
#[command(name = "bec", version, about = "Finite-temperature condensate solvers with periodic microstructure")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Constant- or oscillatory-coupling stationary state as configured.
    Stationary {
        #[command(flatten)]
        common: Common,
    },
    /// Stationary state with the fast scale resolved on the grid.
    FullEps {
        #[command(flatten)]
        common: Common,
        /// Period of the microstructure; overrides `epsilon` in the config.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Two-scale expansion up to the given order.
    Expand {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2)]
        order: usize,
    },
    /// Compares full solves with the expansion over several periods.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated periods; overrides `sweep.epsilons`.
        #[arg(long, value_delimiter = ',')]
        epsilons: Option<Vec<f64>>,
    },
    /// Evolves the stationary state in time.
    Evolve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tfinal: Option<f64>,
        #[arg(long)]
        dt: Option<f64>,
    },
    /// Decay of oscillatory integrals against smooth test functions.
    VerifyAsymptotics {
        #[command(flatten)]
        common: Common,
        /// Decay order the zero-mean remainder must reach.
        #[arg(long, default_value_t = 3)]
        m: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Stationary { common } => commands::stationary(&common.config, &common.out),
        Command::FullEps { common, epsilon } => commands::full_eps(&common.config, &common.out, epsilon),
        Command::Expand { common, order } => commands::expand(&common.config, &common.out, order),
        Command::Sweep { common, epsilons } => commands::sweep(&common.config, &common.out, epsilons),
        Command::Evolve { common, tfinal, dt } => commands::evolve(&common.config, &common.out, tfinal, dt),
        Command::VerifyAsymptotics { common, m } => commands::verify_asymptotics(&common.config, &common.out, m),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
