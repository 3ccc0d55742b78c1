mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use conan::Error;

pub const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  unexpected internal failure
  2  usage error (unknown flag, malformed argument or override)
  3  file missing or unreadable/unwritable
  4  invalid configuration or data (schema, version, parameter, dataset)
  5  integrity failure (checksum mismatch, truncated file)
  6  training aborted (non-finite loss or gradient)
  7  numerical or evaluation failure (shape mismatch, degenerate input)
  8  gradient check failed";

#[derive(Debug, Parser)]
#[command(name = "conan", version, about = "Conditional aggregation of embedding templates", after_help = EXIT_CODES)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML config file; defaults to conan.toml in $CONAN_CONFIG_DIR when that exists
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.lr_main=0.001 (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for data generation and training; wins over config and --set
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives bit-reproducible output
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: u64,
    /// More log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (manifest plus container)
    #[command(after_help = EXIT_CODES)]
    GenSynth {
        /// Manifest path; the container is written next to it as .cnan
        #[arg(long, value_name = "MANIFEST")]
        out: PathBuf,
        /// Stored float width in bytes
        #[arg(long, value_enum, default_value_t = Width::F64)]
        width: Width,
    },
    /// Train a model and write its checkpoint and metrics log
    #[command(after_help = EXIT_CODES)]
    Train {
        #[arg(long, value_name = "MANIFEST")]
        dataset: PathBuf,
        #[arg(long, value_name = "FILE")]
        out_checkpoint: PathBuf,
        /// Metrics log (epoch, train loss, val rank-1); wall times go to <LOG>.timing
        #[arg(long, value_name = "FILE")]
        log: PathBuf,
        /// Continue from the training state stored in this checkpoint
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Aggregate templates with a trained model
    #[command(after_help = EXIT_CODES)]
    Aggregate {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "MANIFEST")]
        dataset: PathBuf,
        #[arg(long, value_name = "ID", required_unless_present = "all", conflicts_with = "all")]
        template_id: Option<String>,
        /// Aggregate every template in the dataset
        #[arg(long)]
        all: bool,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Evaluate checkpoints and baselines on one split
    #[command(after_help = EXIT_CODES)]
    Eval {
        /// Checkpoint to evaluate (repeatable); missing ones are skipped with a warning
        #[arg(long, value_name = "FILE")]
        checkpoint: Vec<PathBuf>,
        #[arg(long, value_name = "MANIFEST")]
        dataset: PathBuf,
        /// Baseline aggregators to include (repeatable)
        #[arg(long, value_enum)]
        baselines: Vec<Baseline>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Machine-readable report (TOML); the table goes to stdout
        #[arg(long, value_name = "FILE")]
        report: PathBuf,
    },
    /// Show the per-embedding weights of one template, sorted by weight
    #[command(after_help = EXIT_CODES)]
    Inspect {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "MANIFEST")]
        dataset: PathBuf,
        #[arg(long, value_name = "ID")]
        template_id: String,
    },
    /// Finite-difference check of the full training loss
    #[command(after_help = EXIT_CODES)]
    Gradcheck {
        /// Instance shapes as DxN (embedding width x template size), comma separated
        #[arg(long, value_delimiter = ',', default_value = "8x1,8x2,8x5,16x1,16x2,16x5")]
        sizes: Vec<String>,
        /// Number of instances; shapes are used round-robin
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Entries sampled per parameter tensor; smaller tensors are checked whole, 0 checks everything
        #[arg(long, default_value_t = 256)]
        max_entries: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Width {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Gap,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

/// Failure of a subcommand, carrying its exit class.
#[derive(Debug)]
pub enum Failure {
    Lib(Error),
    CheckFailed(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::CheckFailed(_) => 8,
            Failure::Lib(e) => match e {
                Error::Usage(_) => 2,
                Error::Io { .. } => 3,
                Error::Schema(_) | Error::Version { .. } | Error::Parameter(_) | Error::Dataset(_) => 4,
                Error::Integrity(_) => 5,
                Error::TrainingAborted(_) | Error::NonFinite(_) => 6,
                Error::Dimension(_)
                | Error::Degenerate(_)
                | Error::Graph(_)
                | Error::Evaluation(_)
                | Error::Batch(_) => 7,
            },
        }
    }

    fn class(&self) -> &'static str {
        match self.code() {
            2 => "usage error",
            3 => "file error",
            4 => "invalid input",
            5 => "integrity error",
            6 => "training aborted",
            7 => "numerical error",
            8 => "check failed",
            _ => "internal error",
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Lib(e) => write!(f, "{e}"),
            Failure::CheckFailed(m) => f.write_str(m),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap prints help and version through the same path.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("CONAN_LOG")
        .init();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads as usize)
        .build_global()
    {
        eprintln!("conan: internal error: {e}");
        return ExitCode::from(1);
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("conan: {}: {f}", f.class());
            ExitCode::from(f.code())
        }
    }
}
