mod commands;
mod config;
mod error;
mod prepared;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use selfaug_core::datasets::SplitName;
use selfaug_core::training::Ablation;

use crate::commands::TrainArgs;

#[derive(Parser)]
#[command(
    name = "selfaug",
    version,
    about = "Self-augmented multi-modal embedding toolkit"
)]
struct Cli {
    /// Log progress to stderr (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum AblationArg {
    None,
    NoCmd,
    NoFd,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::None => Ablation::None,
            AblationArg::NoCmd => Ablation::NoCmd,
            AblationArg::NoFd => Ablation::NoFd,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Build the paired dataset for a config.
    Prepare {
        #[arg(long)]
        config: PathBuf,
        /// Rebuild an existing prepared directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one model and write checkpoint, metrics and summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory (default: `<output_dir>/run-<hash>-<time>`).
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
        /// Overwrite an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory (default: the checkpoint's parent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate all six ablation rows.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Bucket test patterns by gate value.
    ReportAlpha {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Patterns listed per bucket.
        #[arg(long, default_value_t = 5)]
        per_bucket: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write original and augmented embeddings of a split to CSV.
    ExportEmbeddings {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List test patterns one checkpoint gets right and another gets wrong.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        against: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(command: Command) -> error::Result<()> {
    match command {
        Command::Prepare { config, force } => commands::cmd_prepare(&config, force),
        Command::Train {
            config,
            run_dir,
            seed,
            ablation,
            force,
        } => commands::cmd_train(TrainArgs {
            config,
            run_dir,
            seed,
            ablation: ablation.map(Into::into),
            force,
        }),
        Command::Eval {
            config,
            checkpoint,
            out,
        } => commands::cmd_eval(&config, &checkpoint, out),
        Command::Ablate {
            config,
            seed,
            out,
            force,
        } => commands::cmd_ablate(&config, seed, out, force),
        Command::ReportAlpha {
            config,
            checkpoint,
            per_bucket,
            seed,
            out,
        } => commands::cmd_report_alpha(&config, &checkpoint, per_bucket, seed, out),
        Command::ExportEmbeddings {
            config,
            checkpoint,
            split,
            out,
        } => {
            let split = match split {
                SplitArg::Train => SplitName::Train,
                SplitArg::Test => SplitName::Test,
            };
            commands::cmd_export_embeddings(&config, &checkpoint, split, out)
        }
        Command::Compare {
            config,
            checkpoint,
            against,
            out,
        } => commands::cmd_compare(&config, &checkpoint, &against, out),
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
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
