//! `bvos`: synthetic data, training, evaluation, ablation, benchmarks and
//! visualisation for the bilateral-attention segmenter.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bvos_core::synthetic::Category;

#[derive(Parser)]
#[command(name = "bvos", version, about = "Video object segmentation with bilateral attention, at desk scale")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

/// Overrides for the scene selection.
#[derive(Args, Clone, Debug, Default)]
pub struct DataArgs {
    /// Comma-separated scene categories.
    #[arg(long, value_delimiter = ',', value_parser = config::parse_category)]
    pub categories: Option<Vec<Category>>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic sequences to PPM frames, PGM masks and BFLO flows.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train a model and save its EMA checkpoint.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Model preset: toy, tiny or full.
        #[arg(long)]
        preset: Option<String>,
        /// Ablation arm, e.g. `spatial_local/calibrated`.
        #[arg(long)]
        arm: Option<String>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Segment held-out scenes with a checkpoint and score them.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the predicted label masks.
        #[arg(long)]
        save_masks: bool,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Score several checkpoints on the fixed ablation battery.
    Ablate {
        /// `NAME=DIR`, repeatable.
        #[arg(long = "arm", required = true)]
        arms: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        suite_seed: u64,
    },
    /// Time dense against windowed bilateral attention.
    Bench {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "16,32,64,128")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Draw one query's bilateral mask as a PGM.
    VizMask {
        #[arg(long)]
        out: PathBuf,
        /// Take the encoding from this checkpoint on a synthetic frame
        /// instead of drawing it at random.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_parser = config::parse_category, default_value = "twins")]
        category: Category,
        #[arg(long, default_value_t = 1)]
        frame: usize,
        #[arg(long, default_value_t = 16)]
        side: usize,
        #[arg(long, default_value_t = 2)]
        spatial_window: usize,
        #[arg(long)]
        bilateral_window: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Query token; defaults to the grid centre.
        #[arg(long)]
        query: Option<usize>,
        #[arg(long, default_value_t = 16)]
        scale: usize,
        /// Also write the full admitted-key listing.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Render a BFLO flow file with the colour wheel.
    VizFlow {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_radius: Option<f64>,
    },
    /// Run the finite-difference gradient battery.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Coordinates probed per tensor of the model check.
        #[arg(long, default_value_t = 8)]
        coords: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = config::RunConfig::load(cli.config.as_deref()).and_then(|cfg| commands::run(cli.command, cfg));
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
