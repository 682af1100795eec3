//! The `npcd` command-line pipeline: toy data generation, autodecoder and
//! diffusion training, unconditional and disentangled sampling, rendering and
//! evaluation. Exit codes: 0 success, 2 configuration, 3 I/O, 4 numerical failure.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use config::RunConfig;
pub use error::{CliError, CliResult};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "NPCD_THREADS";

#[derive(Debug, Parser)]
#[command(name = "npcd", version, about = "Neural point cloud diffusion pipeline")]
pub struct Cli {
    /// JSON run configuration; every field has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of every stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SampleMode {
    Unconditional,
    AppearanceOnly,
    ShapeOnly,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic multi-view dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the shared decoder and per-object point features.
    TrainAutodecoder {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in `out`.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        lambda_tv: Option<f64>,
        #[arg(long)]
        lambda_kl: Option<f64>,
        #[arg(long, default_value_t = 500)]
        checkpoint_every: u64,
    },
    /// Train the denoiser on fitted point clouds.
    TrainDiffusion {
        /// Directory of fitted `.npcd` clouds with `normalization.json`.
        #[arg(long)]
        clouds: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, default_value_t = 500)]
        checkpoint_every: u64,
    },
    /// Draw point clouds from a trained denoiser.
    Sample {
        /// Output directory of `train-diffusion`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<SampleMode>,
        /// Conditioning cloud for appearance-only or shape-only sampling.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        n_rev: Option<usize>,
        #[arg(long)]
        n_repaint: Option<usize>,
        #[arg(long)]
        n_resample: Option<usize>,
        #[arg(long)]
        num_samples: Option<usize>,
        /// Dump the state every 100 timesteps.
        #[arg(long)]
        trajectory: bool,
        /// Output directory of `train-autodecoder`; enables renders.
        #[arg(long)]
        decoder: Option<PathBuf>,
        /// Camera list (JSON) for renders.
        #[arg(long)]
        cameras: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare generated and reference clouds.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Comma-separated subset of `chamfer,emd`.
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<String>>,
        /// Generated renders (PPM); scored against `--reference-renders`.
        #[arg(long, requires = "reference_renders")]
        generated_renders: Option<PathBuf>,
        #[arg(long, requires = "generated_renders")]
        reference_renders: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a neural point cloud with a trained decoder.
    Render {
        #[arg(long)]
        decoder: PathBuf,
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        cameras: Option<PathBuf>,
        /// Spiral views when no camera file is given.
        #[arg(long, default_value_t = 4)]
        views: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Sets up the thread pool from [`THREADS_ENV`], loads the configuration and runs the command.
pub fn run(cli: Cli) -> CliResult<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().map_err(|_| CliError::Config(format!("{THREADS_ENV}={v} is not a thread count")))?;
        // Ignored when a pool already exists (tests calling run twice).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    commands::dispatch(cli.command, cfg)
}
