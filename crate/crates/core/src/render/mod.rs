//! Differentiable point-based volume rendering.
//!
//! Rays are marched through `[near, far]`; each shading point aggregates the
//! features of its nearest cloud points, the decoder maps the result to color
//! and density, and samples are alpha-composited onto a background.

mod batch;
mod camera;
mod decoder;
mod image;
mod neighbors;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{composite_forward, CompositeLayout, Mat};
use crate::error::{Error, Result};
use crate::point_cloud::NeuralPointCloud;

pub use batch::{render_batch, render_image, render_image_with_index, RayBatch};
pub use camera::{generate_rays, load_cameras, save_cameras, Camera, Ray};
pub use decoder::{aggregate_feature, aggregation_weights, decode_radiance, DecoderConfig, DecoderParams};
pub use image::{Image, View};
pub use neighbors::{median_nn_spacing, Neighbor, NeighborIndex};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub shading_points_per_ray: usize,
    pub neighbors_k: usize,
    pub neighbor_radius: f64,
    pub background_color: [f64; 3],
    pub distance_epsilon: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            shading_points_per_ray: 128,
            neighbors_k: 8,
            neighbor_radius: 0.1,
            background_color: [1.0; 3],
            distance_epsilon: 1e-8,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shading_points_per_ray == 0 {
            return Err(Error::Config("shading_points_per_ray must be at least 1".into()));
        }
        if self.neighbors_k == 0 {
            return Err(Error::Config("neighbors_k must be at least 1".into()));
        }
        if !(self.neighbor_radius > 0.0 && self.neighbor_radius.is_finite()) {
            return Err(Error::Config(format!("neighbor_radius must be positive, got {}", self.neighbor_radius)));
        }
        if !(self.distance_epsilon > 0.0) {
            return Err(Error::Config("distance_epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// `n` increasing depths in `[near, far]`, one per equal-width bin: uniform
/// within the bin when `rng` is given, the bin midpoint otherwise.
pub fn sample_depths<R: Rng + ?Sized>(near: f64, far: f64, n: usize, rng: Option<&mut R>) -> Vec<f64> {
    let width = (far - near) / n as f64;
    match rng {
        None => (0..n).map(|i| near + (i as f64 + 0.5) * width).collect(),
        Some(rng) => (0..n).map(|i| near + (i as f64 + rng.gen::<f64>()) * width).collect(),
    }
}

/// Depth gaps: to the next sample, and to `far` for the last one.
pub fn depth_deltas(depths: &[f64], far: f64) -> Vec<f64> {
    let mut d: Vec<f64> = depths.windows(2).map(|w| w[1] - w[0]).collect();
    if let Some(&last) = depths.last() {
        d.push(far - last);
    }
    d
}

/// Samples of one ray for [`integrate_ray`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RaySample {
    pub color: [f64; 3],
    pub density: f64,
    pub depth: f64,
}

/// Quadrature compositing of `samples` (increasing depth) onto `background`.
pub fn integrate_ray(samples: &[RaySample], far: f64, background: [f64; 3]) -> Result<[f64; 3]> {
    if let Some(s) = samples.iter().find(|s| !(s.density >= 0.0)) {
        return Err(Error::State(format!("negative or NaN density {} reached the integrator", s.density)));
    }
    if samples.windows(2).any(|w| w[1].depth < w[0].depth) {
        return Err(Error::Argument("ray samples must be in increasing depth order".into()));
    }
    let depths: Vec<f64> = samples.iter().map(|s| s.depth).collect();
    let color = Mat::from_shape_fn((samples.len(), 3), |(i, c)| samples[i].color[c]);
    let sigma = Mat::from_shape_fn((samples.len(), 1), |(i, _)| samples[i].density);
    let layout = CompositeLayout {
        rays: vec![0..samples.len()],
        deltas: depth_deltas(&depths, far),
        background,
    };
    let (px, _) = composite_forward(&color, &sigma, &layout);
    Ok([px[[0, 0]], px[[0, 1]], px[[0, 2]]])
}

/// Per-sample weights `T_s alpha_s` and the transmittance left after the last sample.
pub fn quadrature_weights(densities: &[f64], deltas: &[f64]) -> (Vec<f64>, f64) {
    let mut t = 1.0;
    let mut w = Vec::with_capacity(densities.len());
    for (&s, &d) in densities.iter().zip(deltas) {
        let alpha = -(-s * d).exp_m1();
        w.push(t * alpha);
        t *= 1.0 - alpha;
    }
    (w, t)
}

/// Radius of `multiplier` times the median nearest-neighbor spacing over `clouds`.
pub fn radius_from_spacing(clouds: &[&NeuralPointCloud], multiplier: f64) -> Result<f64> {
    let pos: Vec<&Mat> = clouds.iter().map(|c| c.positions()).collect();
    Ok(multiplier * median_nn_spacing(&pos)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn midpoint_depths() {
        assert_eq!(sample_depths::<ChaCha8Rng>(0.0, 1.0, 2, None), vec![0.25, 0.75]);
    }

    #[test]
    fn stratified_depths_increase_within_bounds() {
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = sample_depths(0.5, 2.1, 64, Some(&mut rng));
            assert!(d.windows(2).all(|w| w[0] < w[1]));
            assert!(d.iter().all(|&x| (0.5..=2.1).contains(&x)));
        }
    }

    #[test]
    fn deltas_end_at_far() {
        assert_eq!(depth_deltas(&[0.25, 0.75], 1.0), vec![0.5, 0.25]);
    }

    #[test]
    fn transparent_ray_is_background() {
        let s: Vec<RaySample> = (0..4).map(|i| RaySample { color: [0.1, 0.9, 0.3], density: 0.0, depth: i as f64 * 0.1 }).collect();
        assert_eq!(integrate_ray(&s, 1.0, [0.2, 0.4, 0.6]).unwrap(), [0.2, 0.4, 0.6]);
    }

    #[test]
    fn half_opacity_sample() {
        // sigma * delta = ln 2 gives alpha = 1/2.
        let s = [RaySample { color: [1.0, 0.0, 0.5], density: 2f64.ln() / 0.5, depth: 0.5 }];
        let px = integrate_ray(&s, 1.0, [0.0, 1.0, 0.5]).unwrap();
        for (a, b) in px.iter().zip([0.5, 0.5, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn opaque_first_sample() {
        let s = [
            RaySample { color: [0.3, 0.2, 0.1], density: 1e30, depth: 0.1 },
            RaySample { color: [1.0, 1.0, 1.0], density: 5.0, depth: 0.2 },
        ];
        assert_eq!(integrate_ray(&s, 1.0, [1.0; 3]).unwrap(), [0.3, 0.2, 0.1]);
    }

    #[test]
    fn negative_density_is_internal_error() {
        let s = [RaySample { color: [0.0; 3], density: -1.0, depth: 0.1 }];
        assert!(matches!(integrate_ray(&s, 1.0, [1.0; 3]), Err(Error::State(_))));
    }

    #[test]
    fn quadrature_conserves_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let n = rng.gen_range(1..64);
            let sig: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..30.0)).collect();
            let del: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..0.2)).collect();
            let (w, t) = quadrature_weights(&sig, &del);
            assert!((w.iter().sum::<f64>() + t - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn config_validation() {
        assert!(RenderConfig::default().validate().is_ok());
        let bad = RenderConfig { neighbors_k: 0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = RenderConfig { neighbor_radius: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
