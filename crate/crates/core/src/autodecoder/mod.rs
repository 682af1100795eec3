//! Autodecoder training: a shared decoder and per-object point features fit
//! jointly to multi-view images, with optional TV and variational (KL) terms.

mod analysis;
mod losses;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::diff::{AdamConfig, Mat, Precision};
use crate::error::{Error, Result};
use crate::point_cloud::VarianceMode;
use crate::render::{DecoderConfig, RenderConfig, View};

pub use analysis::{cosine_similarity_analysis, mean_pairwise_cosine, SimilarityReport};
pub use losses::{
    kl_loss, kl_loss_on_tape, pixel_mse, reconstruction_loss_on_tape, reparameterize_on_tape, reparameterize_sample,
    tv_loss, tv_loss_on_tape, TvGraph,
};
pub use trainer::{write_history_csv, Autodecoder, LossRecord};

/// Fixed point positions of one object plus its posed images.
#[derive(Clone, Debug)]
pub struct ObjectRecord {
    pub id: String,
    pub positions: Mat,
    pub views: Vec<View>,
}

impl ObjectRecord {
    pub fn new(id: String, positions: Mat, views: Vec<View>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::Argument(format!("object {id} has no views")));
        }
        let (w, h) = (views[0].image.width, views[0].image.height);
        if views.iter().any(|v| v.image.width != w || v.image.height != h) {
            return Err(Error::Argument(format!("views of object {id} differ in size")));
        }
        if positions.nrows() == 0 || positions.ncols() != 3 || positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("object {id} needs finite Mx3 positions with M >= 1")));
        }
        Ok(Self { id, positions, views })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    #[default]
    Zero,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutodecoderConfig {
    pub lr: f64,
    pub lambda_tv: f64,
    pub lambda_kl: f64,
    pub tv_neighborhood_k: usize,
    pub rays_per_view_per_step: usize,
    pub views_per_object_per_step: usize,
    /// Objects per step; 0 means all.
    pub objects_per_step: usize,
    pub steps: u64,
    pub init_mode: InitMode,
    /// Standard deviation of random feature initialization.
    pub init_std: f64,
    pub variational: bool,
    pub variance_mode: VarianceMode,
    pub init_log_variance: f64,
    pub feature_dim: usize,
    pub decoder: DecoderConfig,
    pub render: RenderConfig,
    /// When set, the neighbor radius is this multiple of the median
    /// nearest-neighbor spacing of the training clouds.
    pub radius_multiplier: Option<f64>,
    pub precision: Precision,
    pub seed: u64,
}

pub const LOG_VARIANCE_MIN: f64 = -20.0;
pub const LOG_VARIANCE_MAX: f64 = 10.0;

impl Default for AutodecoderConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lambda_tv: 0.0,
            lambda_kl: 0.0,
            tv_neighborhood_k: 3,
            rays_per_view_per_step: 64,
            views_per_object_per_step: 2,
            objects_per_step: 0,
            steps: 2000,
            init_mode: InitMode::Zero,
            init_std: 1.0,
            variational: false,
            variance_mode: VarianceMode::Diagonal,
            init_log_variance: -4.0,
            feature_dim: 8,
            decoder: DecoderConfig {
                feature_dim: 8,
                hidden_width: 32,
                shading_dim: 32,
                aggregation_hidden_layers: 2,
                color_hidden_layers: 2,
                density_hidden_layers: 1,
                ..Default::default()
            },
            render: RenderConfig { shading_points_per_ray: 64, ..Default::default() },
            radius_multiplier: Some(3.0),
            precision: Precision::F64,
            seed: 0,
        }
    }
}

impl AutodecoderConfig {
    pub fn validate(&self) -> Result<()> {
        AdamConfig::with_lr(self.lr).validate()?;
        if !(self.lambda_tv >= 0.0 && self.lambda_kl >= 0.0) {
            return Err(Error::Config("regularization weights must be non-negative".into()));
        }
        if self.rays_per_view_per_step == 0 || self.views_per_object_per_step == 0 {
            return Err(Error::Config("rays_per_view_per_step and views_per_object_per_step must be at least 1".into()));
        }
        if self.tv_neighborhood_k == 0 {
            return Err(Error::Config("tv_neighborhood_k must be at least 1".into()));
        }
        if self.feature_dim == 0 || self.decoder.feature_dim != self.feature_dim {
            return Err(Error::Config(format!(
                "feature_dim {} must be positive and match the decoder's {}",
                self.feature_dim, self.decoder.feature_dim
            )));
        }
        if self.lambda_kl > 0.0 && !self.variational {
            return Err(Error::Config("lambda_kl needs variational = true".into()));
        }
        if !(self.init_std >= 0.0) || !(LOG_VARIANCE_MIN..=LOG_VARIANCE_MAX).contains(&self.init_log_variance) {
            return Err(Error::Config("init_std must be non-negative and init_log_variance within the clamp range".into()));
        }
        if let Some(m) = self.radius_multiplier {
            if !(m > 0.0) {
                return Err(Error::Config("radius_multiplier must be positive".into()));
            }
        } else {
            self.render.validate()?;
        }
        self.decoder.specs()?;
        Ok(())
    }
}
