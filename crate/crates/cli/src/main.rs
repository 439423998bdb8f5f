//! `asda`: generate the two-domain benchmark, train, evaluate, run the
//! comparison ladder and render reports.

mod commands;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use asda_core::trainer::Mode;
use asda_core::Error;
use clap::{Parser, Subcommand};

use commands::{AblateArgs, EvalArgs, GenDataArgs, Overrides, TrainArgs};
use report::ReportArgs;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_) | Error::Range { .. }) => 2,
            CliError::Core(Error::Numeric { .. }) => 4,
            CliError::Core(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "asda", version, about = "Weakly supervised adversarial domain adaptation on synthetic street scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct DataRoot {
    /// Directory holding source-train, target-train and target-val.
    #[arg(long, env = "ASDA_DATA_ROOT", default_value = "data")]
    data: PathBuf,
}

#[derive(clap::Args)]
struct ConfigFlags {
    /// TOML training configuration (defaults to the ladder schedule).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate source-train, target-train and target-val splits.
    GenData {
        #[command(flatten)]
        root: DataRoot,
        /// Scene height and width in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 800)]
        source: usize,
        #[arg(long, default_value_t = 800)]
        target: usize,
        #[arg(long, default_value_t = 200)]
        val: usize,
        /// Base seed; the splits use seed+1, seed+2 and seed+3.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model into runs/<timestamp>-<config hash>/.
    Train {
        #[command(flatten)]
        root: DataRoot,
        #[arg(long, conflicts_with = "resume")]
        mode: Option<Mode>,
        #[command(flatten)]
        cfg: ConfigFlags,
        #[arg(long, conflicts_with = "resume")]
        seed: Option<u64>,
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
        /// Continue the run in this directory from its last checkpoint.
        #[arg(long, conflicts_with_all = ["config", "steps", "batch"])]
        resume: Option<PathBuf>,
        /// Stop with a checkpoint once this many steps are done.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Segmentation-stream evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labelled split to score (defaults to <data>/target-val).
        #[arg(long)]
        split: Option<PathBuf>,
        #[command(flatten)]
        root: DataRoot,
        /// Classes (names or ids) left out of the subset mIoU.
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<String>,
        /// Output directory (defaults to a fresh directory under --runs).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
    },
    /// Train every mode over several seeds and compare median mIoU.
    Ablate {
        #[command(flatten)]
        root: DataRoot,
        #[arg(long, value_delimiter = ',', default_value = "ds,ds-pdc,full,full-2class-odc,single-seg")]
        modes: Vec<Mode>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[command(flatten)]
        cfg: ConfigFlags,
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
    },
    /// Curves and prediction panels for finished runs.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
        #[command(flatten)]
        root: DataRoot,
        /// Number of scenes rendered as panels.
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn overrides(cfg: ConfigFlags, seed: Option<u64>) -> Overrides {
    Overrides {
        config: cfg.config,
        steps: cfg.steps,
        batch: cfg.batch,
        seed,
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData {
            root,
            size,
            source,
            target,
            val,
            seed,
        } => commands::gen_data(&GenDataArgs {
            root: root.data,
            size,
            source,
            target,
            val,
            seed,
        }),
        Command::Train {
            root,
            mode,
            cfg,
            seed,
            runs,
            resume,
            stop_at,
        } => commands::train(&TrainArgs {
            data: root.data,
            runs,
            mode,
            overrides: overrides(cfg, seed),
            resume,
            stop_at,
        })
        .map(|dir| println!("{}", dir.display())),
        Command::Eval {
            checkpoint,
            split,
            root,
            exclude,
            out,
            runs,
        } => commands::eval(&EvalArgs {
            checkpoint,
            split: split.unwrap_or_else(|| root.data.join(commands::SPLITS[2])),
            runs,
            exclude,
            out,
        })
        .map(|dir| println!("{}", dir.display())),
        Command::Ablate {
            root,
            modes,
            seeds,
            cfg,
            runs,
        } => commands::ablate(&AblateArgs {
            data: root.data,
            runs,
            modes,
            seeds,
            overrides: overrides(cfg, None),
        })
        .map(|dir| println!("{}", dir.display())),
        Command::Report {
            run_dirs,
            split,
            root,
            samples,
            out,
        } => report::report(&ReportArgs {
            runs: run_dirs,
            split: split.unwrap_or_else(|| root.data.join(commands::SPLITS[2])),
            samples,
            out,
        })
        .map(|_| ()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
