//! Denoising diffusion over neural point clouds: linear noise schedule,
//! forward and reverse processes, a transformer noise predictor with one
//! token per point plus a timestep token, training with EMA, and
//! unconditional sampling with value clipping.

mod denoiser;
mod sample;
mod schedule;
mod train;

use serde::{Deserialize, Serialize};

use crate::diff::{AdamConfig, Precision};
use crate::error::{Error, Result};

pub use denoiser::{timestep_embedding, Denoiser, DenoiserConfig, NoisePredictor};
pub use sample::{sample_unconditional, sample_unconditional_traced, SamplingObserver, Trace};
pub use schedule::{forward_jump, forward_step, linear_schedule, reverse_step, NoiseSchedule};
pub use train::{
    ema_update, load_ema_denoiser, training_draws, training_loss, write_loss_csv, DiffusionLossRecord, DiffusionTrainer,
    TrainingDraw, UNNORMALIZED_LIMIT,
};

pub(crate) use sample::{check_sampling_inputs, checked_predict, denormalized, INIT_STREAM, RESAMPLE_STREAM, REVERSE_STREAM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub denoiser: DenoiserConfig,
    pub ema_decay: f64,
    /// Caps the EMA decay at `(1 + n) / (10 + n)` after `n` updates, so short
    /// runs are not dominated by the initial weights.
    pub ema_warmup: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            denoiser: DenoiserConfig::default(),
            ema_decay: 0.9999,
            ema_warmup: true,
            lr: 1e-3,
            batch_size: 8,
            steps: 2000,
            precision: Precision::F64,
            seed: 0,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.denoiser.validate()?;
        AdamConfig::with_lr(self.lr).validate()?;
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1]", self.ema_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        linear_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}
