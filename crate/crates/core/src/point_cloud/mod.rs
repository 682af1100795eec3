//! Neural point clouds: positions plus per-point latent features.

mod fps;
mod io;
mod normalize;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::Mat;
use crate::error::{Error, Result};

pub use fps::farthest_point_sample;
pub use io::{load, read_npcd, save, write_npcd, NPCD_MAGIC, NPCD_VERSION};
pub use normalize::{compute_normalization, denormalize, normalize, ClipBounds, NormalizationStats};

/// `M` positions in object space, row-aligned with `M` feature vectors of width `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralPointCloud {
    positions: Mat,
    features: Mat,
}

fn check_positions(positions: &Mat) -> Result<()> {
    if positions.nrows() == 0 {
        return Err(Error::Argument("point cloud needs at least one point".into()));
    }
    if positions.ncols() != 3 {
        return Err(Error::dim("positions", "Mx3", format!("{}x{}", positions.nrows(), positions.ncols())));
    }
    if positions.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("positions must be finite".into()));
    }
    Ok(())
}

impl NeuralPointCloud {
    pub fn new(positions: Mat, features: Mat) -> Result<Self> {
        check_positions(&positions)?;
        if features.nrows() != positions.nrows() {
            return Err(Error::dim("features", format!("{} rows", positions.nrows()), features.nrows()));
        }
        if features.ncols() == 0 {
            return Err(Error::Argument("feature dimension must be at least 1".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("features must be finite".into()));
        }
        Ok(Self { positions, features })
    }

    /// Features initialized to exactly zero.
    pub fn zero_init(positions: Mat, feature_dim: usize) -> Result<Self> {
        let m = positions.nrows();
        Self::new(positions, Mat::zeros((m, feature_dim)))
    }

    /// Features drawn i.i.d. from a standard normal.
    pub fn random_init(positions: Mat, feature_dim: usize, seed: u64) -> Result<Self> {
        let m = positions.nrows();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = Mat::from_shape_simple_fn((m, feature_dim), || StandardNormal.sample(&mut rng));
        Self::new(positions, features)
    }

    pub fn positions(&self) -> &Mat {
        &self.positions
    }

    pub fn features(&self) -> &Mat {
        &self.features
    }

    pub fn num_points(&self) -> usize {
        self.positions.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn into_parts(self) -> (Mat, Mat) {
        (self.positions, self.features)
    }

    pub fn with_features(&self, features: Mat) -> Result<Self> {
        Self::new(self.positions.clone(), features)
    }

    /// Reorders points by `perm` (row `i` of the result is row `perm[i]`).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Self::new(
            self.positions.select(ndarray::Axis(0), perm),
            self.features.select(ndarray::Axis(0), perm),
        )
    }
}

/// Whether the variational cloud stores one log-variance per feature or one per point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMode {
    #[default]
    Diagonal,
    Scalar,
}

/// Gaussian latent per point: mean `M x D`, log-variance `M x D` or `M x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalNeuralPointCloud {
    pub positions: Mat,
    pub means: Mat,
    pub log_variances: Mat,
}

impl VariationalNeuralPointCloud {
    pub fn new(positions: Mat, means: Mat, log_variances: Mat) -> Result<Self> {
        check_positions(&positions)?;
        let m = positions.nrows();
        if means.nrows() != m || means.ncols() == 0 {
            return Err(Error::dim("means", format!("{m}xD"), format!("{}x{}", means.nrows(), means.ncols())));
        }
        if log_variances.nrows() != m || (log_variances.ncols() != means.ncols() && log_variances.ncols() != 1) {
            return Err(Error::dim(
                "log_variances",
                format!("{m}x{} or {m}x1", means.ncols()),
                format!("{}x{}", log_variances.nrows(), log_variances.ncols()),
            ));
        }
        if means.iter().chain(log_variances.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Argument("variational parameters must be finite".into()));
        }
        Ok(Self {
            positions,
            means,
            log_variances,
        })
    }

    /// Zero means and unit variances.
    pub fn standard(positions: Mat, feature_dim: usize, mode: VarianceMode) -> Result<Self> {
        let m = positions.nrows();
        let lv_cols = match mode {
            VarianceMode::Diagonal => feature_dim,
            VarianceMode::Scalar => 1,
        };
        Self::new(positions, Mat::zeros((m, feature_dim)), Mat::zeros((m, lv_cols)))
    }

    pub fn variance_mode(&self) -> VarianceMode {
        if self.log_variances.ncols() == 1 && self.means.ncols() != 1 {
            VarianceMode::Scalar
        } else {
            VarianceMode::Diagonal
        }
    }

    /// The cloud of means, which is what the diffusion model is trained on.
    pub fn mean_cloud(&self) -> Result<NeuralPointCloud> {
        NeuralPointCloud::new(self.positions.clone(), self.means.clone())
    }
}
