//! `ciae` — panoptic segmentation from pixel embeddings on synthetic
//! scenes: generate ground truth, train an embedding map, fuse
//! predictions, evaluate PQ, visualize, and sweep ablations.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 runtime
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

pub use config::RunConfig;

/// Error with an exit-code class.
#[derive(Debug)]
pub struct CliError {
    config_class: bool,
    message: String,
}

impl CliError {
    pub fn config(message: String) -> Self {
        Self {
            config_class: true,
            message,
        }
    }

    pub fn runtime(message: String) -> Self {
        Self {
            config_class: false,
            message,
        }
    }

    fn exit_code(&self) -> u8 {
        if self.config_class {
            2
        } else {
            3
        }
    }
}

impl From<ciae_core::Error> for CliError {
    fn from(err: ciae_core::Error) -> Self {
        use ciae_core::Error as E;
        let config_class = match &err {
            E::InvalidArgument(_) | E::InfeasibleConfig(_) | E::Format(_) => true,
            E::Io(io) => io.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        };
        Self {
            config_class,
            message: err.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "ciae",
    version,
    about = "Pixel-embedding panoptic segmentation on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic panoptic scene.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the scene seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train an embedding map on a scene.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Scene directory (meta.json + rasters).
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run panoptic fusion with simulated detections.
    Infer {
        #[arg(long)]
        config: PathBuf,
        /// Trained checkpoint file.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use ground-truth boxes and mask-mean query embeddings.
        #[arg(long)]
        oracle: bool,
        /// Override the proposal-simulation seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a prediction against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Metrics directory; defaults to the prediction directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a checkpoint or prediction as a PPM image.
    Viz {
        #[arg(long, conflicts_with = "pred")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Palette seed for segment colors.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sweep one parameter across seeds and collect PQ into a CSV.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { config, out, seed } => commands::generate(&config, &out, seed),
        Command::Train {
            config,
            scene,
            out,
            seed,
        } => commands::train_cmd(&config, &scene, &out, seed),
        Command::Infer {
            config,
            checkpoint,
            scene,
            out,
            oracle,
            seed,
        } => commands::infer(&config, &checkpoint, &scene, &out, oracle, seed),
        Command::Eval { pred, scene, out } => commands::eval(&pred, &scene, out.as_deref()),
        Command::Viz {
            checkpoint,
            pred,
            out,
            seed,
        } => commands::viz(checkpoint.as_deref(), pred.as_deref(), &out, seed),
        Command::Ablate { config, out } => commands::ablate(&config, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message);
            ExitCode::from(err.exit_code())
        }
    }
}
