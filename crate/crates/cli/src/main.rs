//! `a2net`: train, run, and probe the adjacent-aggregation restoration
//! models from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use config::RunConfig;

/// Failure categories with stable process exit codes: configuration
/// problems exit 2, dataset and image problems exit 3, checkpoint problems
/// exit 4.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Checkpoint(_) => 4,
        }
    }
}

#[derive(Parser)]
#[command(name = "a2net", version, about = "Raindrop removal with adjacent-aggregation networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on stem-matched rain/clean PNG pairs and write checkpoints.
    Train {
        /// JSON run configuration; stock settings when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root containing rain/ and clean/ directories.
        #[arg(long)]
        data_root: PathBuf,
        /// Output directory for checkpoints and the loss log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Restore one PNG with a trained checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score a checkpoint over a paired dataset; CSV on stdout.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset root containing rain/ and clean/ directories.
        #[arg(long)]
        pairs_root: PathBuf,
    },
    /// Print the variant and exact trainable-parameter count.
    Params {
        /// JSON run configuration; stock settings when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Histogram degraded-minus-clean residuals per channel.
    Analyze {
        #[arg(long)]
        pairs_root: PathBuf,
        /// Channel space for the residuals.
        #[arg(long, default_value = "yuv", value_parser = ["rgb", "yuv"])]
        space: String,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        /// Destination CSV file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Composite the clean image's luminance or chrominance onto the
    /// degraded image.
    Swap {
        #[arg(long)]
        degraded: PathBuf,
        #[arg(long)]
        clean: PathBuf,
        /// Which clean component to take.
        #[arg(long, value_parser = ["y", "uv"])]
        mode: String,
        /// Destination PNG.
        #[arg(long)]
        out: PathBuf,
    },
    /// Time forward passes at square input sizes; CSV on stdout.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated edge lengths in pixels.
        #[arg(long, value_delimiter = ',', default_value = "256,512")]
        sizes: Vec<usize>,
        /// Forward passes averaged per size.
        #[arg(long, default_value_t = 3)]
        repeat: usize,
    },
    /// Materialize a synthetic paired dataset.
    Synth {
        /// Existing clean PNGs to degrade; generated when omitted.
        #[arg(long)]
        clean_root: Option<PathBuf>,
        /// Destination root; rain/ and clean/ are created inside.
        #[arg(long)]
        out_root: PathBuf,
        /// Degrader knobs as JSON; stock values when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Overrides the degrader seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Generated clean images when --clean-root is omitted.
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Edge length of generated clean images.
        #[arg(long, default_value_t = 96)]
        size: usize,
    },
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train {
            config,
            data_root,
            out,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            commands::train(&cfg, &data_root, &out)
        }
        Command::Infer {
            ckpt,
            input,
            output,
        } => commands::infer(&ckpt, &input, &output),
        Command::Eval { ckpt, pairs_root } => commands::eval(&ckpt, &pairs_root),
        Command::Params { config } => {
            let cfg = RunConfig::load(config.as_deref())?;
            commands::params(&cfg)
        }
        Command::Analyze {
            pairs_root,
            space,
            bins,
            out,
        } => commands::analyze(&pairs_root, &space, bins, &out),
        Command::Swap {
            degraded,
            clean,
            mode,
            out,
        } => commands::swap(&degraded, &clean, &mode, &out),
        Command::Bench {
            ckpt,
            sizes,
            repeat,
        } => commands::bench(&ckpt, &sizes, repeat),
        Command::Synth {
            clean_root,
            out_root,
            params,
            seed,
            count,
            size,
        } => commands::synth(
            clean_root.as_deref(),
            &out_root,
            params.as_deref(),
            seed,
            count,
            size,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
