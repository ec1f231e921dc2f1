//! `hss`: generate, calibrate, segment, pretrain, train, sweep and report.
//!
//! Exit status: 0 on success, 1 on a usage error, 2 on a data or
//! validation error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "hss", version, about = "Hyperspectral seed classification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Log more on stderr (-v debug, -vv trace with every seed).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

/// Flags shared by every subcommand. Flags override config-file values.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config file, or a previous run's `run.json`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input dataset, cube or results directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (or cube stem for single-cube calibration).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed override; `HSS_SEED` supplies it when the flag is absent.
    #[arg(long, env = "HSS_SEED")]
    pub seed: Option<u64>,
    /// Concurrent training runs (default: logical processors).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic seed dataset (or pretext set) with ground truth.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Generate the pretext shapes used for pretraining.
        #[arg(long)]
        pretext: bool,
    },
    /// Convert raw cubes to reflectance.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Dark reference cube, for single-cube input.
        #[arg(long)]
        dark: Option<PathBuf>,
        /// White reference cube, for single-cube input.
        #[arg(long)]
        white: Option<PathBuf>,
    },
    /// Threshold, label and crop seeds.
    Segment {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain a backbone on synthetic pretext shapes.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune and evaluate one model on one split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding `backbone.hssw` and `model.json`.
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// Band selector: `full`, `group:N` or `band:N`.
        #[arg(long)]
        selector: Option<String>,
    },
    /// Train every selector over repeated splits and write the report.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// Comma-separated selectors; `groups` and `singles` expand to the
        /// standard schedules.
        #[arg(long, value_delimiter = ',')]
        selectors: Option<Vec<String>>,
    },
    /// Rebuild summary.csv, timing.csv and plotdata.csv from report.json.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

/// A failed command and the exit status it maps to.
pub enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Data(e.into())
    }
}

pub type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Gen { common, pretext } => commands::gen(&common, pretext),
        Command::Calibrate { common, dark, white } => commands::calibrate(&common, dark, white),
        Command::Segment { common } => commands::segment(&common),
        Command::Pretrain { common } => commands::pretrain(&common),
        Command::Train {
            common,
            backbone,
            selector,
        } => commands::train(&common, backbone, selector),
        Command::Sweep {
            common,
            backbone,
            selectors,
        } => commands::sweep(&common, backbone, selectors),
        Command::Report { common } => commands::report(&common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nUsage: hss <gen|calibrate|segment|pretrain|train|sweep|report> [--config path] [--data path] [--out path] [--seed u64] [--jobs n] [-v]");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
