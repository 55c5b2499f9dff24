use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use posebench_cli::checks;
use posebench_cli::commands::{cmd_bench, cmd_eval, cmd_gen, cmd_train, Solver};
use posebench_cli::config::RunConfig;
use posebench_cli::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "posebench", version, about = "Dense-correspondence pose benchmark on a synthetic sphere")]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and test splits.
    Gen {
        #[arg(long)]
        seed: u64,
    },
    /// Train the network on the train split.
    Train {
        #[arg(long)]
        seed: u64,
        /// Continue from the checkpoint, including its optimizer state.
        #[arg(long)]
        resume: bool,
    },
    /// Run both solvers over the noise and outlier grid.
    Bench {
        #[arg(long)]
        seed: u64,
    },
    /// Score one solver on a dataset file.
    Eval {
        #[arg(long, default_value = "patch_pnp")]
        solver: Solver,
        /// Defaults to the configured test split.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the gradient checks and solver, geometry, rendering and metric oracles.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("POSEBENCH_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("POSEBENCH_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Config(e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Gen { seed } => cmd_gen(&cfg, seed).map(drop),
        Command::Train { seed, resume } => cmd_train(&cfg, seed, resume).map(drop),
        Command::Bench { seed } => cmd_bench(&cfg, seed).map(drop),
        Command::Eval { solver, dataset, seed } => {
            let dataset = dataset.unwrap_or_else(|| cfg.test_path.clone());
            cmd_eval(&cfg, solver, &dataset, seed).map(drop)
        }
        Command::Selftest { seed } => {
            let outcomes = checks::self_test(seed);
            for o in &outcomes {
                println!("{o}");
            }
            match outcomes.iter().filter(|o| !o.passed).count() {
                0 => Ok(()),
                n => Err(CliError::Check(n)),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
