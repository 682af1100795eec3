use std::path::Path;

use serde::{Deserialize, Serialize};

use super::NeuralPointCloud;
use crate::diff::Mat;
use crate::error::{Error, Result};

/// Dataset-level statistics mapping clouds to the diffusion model's space:
/// positions to zero mean and unit (global, scalar) standard deviation,
/// features affinely to `[-1, 1]` per dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationStats {
    pub position_mean: [f64; 3],
    pub position_scale: f64,
    pub feature_min: Vec<f64>,
    pub feature_max: Vec<f64>,
}

pub fn compute_normalization(dataset: &[NeuralPointCloud]) -> Result<NormalizationStats> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::Argument("cannot normalize an empty dataset".into()))?;
    let d = first.feature_dim();
    if let Some(bad) = dataset.iter().find(|pc| pc.feature_dim() != d) {
        return Err(Error::dim("compute_normalization", format!("feature dim {d}"), bad.feature_dim()));
    }
    let n_points: usize = dataset.iter().map(|pc| pc.num_points()).sum();
    let mut mean = [0.0; 3];
    for pc in dataset {
        for row in pc.positions().rows() {
            for c in 0..3 {
                mean[c] += row[c];
            }
        }
    }
    for m in &mut mean {
        *m /= n_points as f64;
    }
    let mut ss = 0.0;
    for pc in dataset {
        for row in pc.positions().rows() {
            for c in 0..3 {
                ss += (row[c] - mean[c]).powi(2);
            }
        }
    }
    let scale = (ss / (3 * n_points) as f64).sqrt();
    if !(scale > 0.0) {
        return Err(Error::DegenerateData("point positions have zero variance".into()));
    }
    let mut fmin = vec![f64::INFINITY; d];
    let mut fmax = vec![f64::NEG_INFINITY; d];
    for pc in dataset {
        for row in pc.features().rows() {
            for j in 0..d {
                fmin[j] = fmin[j].min(row[j]);
                fmax[j] = fmax[j].max(row[j]);
            }
        }
    }
    Ok(NormalizationStats {
        position_mean: mean,
        position_scale: scale,
        feature_min: fmin,
        feature_max: fmax,
    })
}

impl NormalizationStats {
    pub fn feature_dim(&self) -> usize {
        self.feature_min.len()
    }

    fn check(&self, pc: &NeuralPointCloud) -> Result<()> {
        if pc.feature_dim() != self.feature_dim() {
            return Err(Error::Argument(format!(
                "normalization stats have {} feature dims, cloud has {}",
                self.feature_dim(),
                pc.feature_dim()
            )));
        }
        Ok(())
    }

    pub fn normalize_positions(&self, p: &Mat) -> Mat {
        let mut out = p.clone();
        for mut row in out.rows_mut() {
            for c in 0..3 {
                row[c] = (row[c] - self.position_mean[c]) / self.position_scale;
            }
        }
        out
    }

    pub fn denormalize_positions(&self, p: &Mat) -> Mat {
        let mut out = p.clone();
        for mut row in out.rows_mut() {
            for c in 0..3 {
                row[c] = row[c] * self.position_scale + self.position_mean[c];
            }
        }
        out
    }

    pub fn normalize_features(&self, f: &Mat) -> Mat {
        let mut out = f.clone();
        for mut row in out.rows_mut() {
            for j in 0..row.len() {
                let (lo, hi) = (self.feature_min[j], self.feature_max[j]);
                row[j] = if hi > lo { 2.0 * (row[j] - lo) / (hi - lo) - 1.0 } else { 0.0 };
            }
        }
        out
    }

    pub fn denormalize_features(&self, f: &Mat) -> Mat {
        let mut out = f.clone();
        for mut row in out.rows_mut() {
            for j in 0..row.len() {
                let (lo, hi) = (self.feature_min[j], self.feature_max[j]);
                row[j] = if hi > lo { (row[j] + 1.0) * 0.5 * (hi - lo) + lo } else { lo };
            }
        }
        out
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

pub fn normalize(pc: &NeuralPointCloud, stats: &NormalizationStats) -> Result<NeuralPointCloud> {
    stats.check(pc)?;
    NeuralPointCloud::new(stats.normalize_positions(pc.positions()), stats.normalize_features(pc.features()))
}

pub fn denormalize(pc: &NeuralPointCloud, stats: &NormalizationStats) -> Result<NeuralPointCloud> {
    stats.check(pc)?;
    NeuralPointCloud::new(stats.denormalize_positions(pc.positions()), stats.denormalize_features(pc.features()))
}

/// Per-coordinate sampling bounds in normalized space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipBounds {
    pub position_min: [f64; 3],
    pub position_max: [f64; 3],
    pub feature_min: Vec<f64>,
    pub feature_max: Vec<f64>,
}

impl ClipBounds {
    /// Extremes of an already normalized dataset.
    pub fn from_normalized(dataset: &[NeuralPointCloud]) -> Result<Self> {
        let first = dataset
            .first()
            .ok_or_else(|| Error::Argument("cannot derive clip bounds from an empty dataset".into()))?;
        let d = first.feature_dim();
        let mut b = ClipBounds {
            position_min: [f64::INFINITY; 3],
            position_max: [f64::NEG_INFINITY; 3],
            feature_min: vec![f64::INFINITY; d],
            feature_max: vec![f64::NEG_INFINITY; d],
        };
        for pc in dataset {
            for row in pc.positions().rows() {
                for c in 0..3 {
                    b.position_min[c] = b.position_min[c].min(row[c]);
                    b.position_max[c] = b.position_max[c].max(row[c]);
                }
            }
            for row in pc.features().rows() {
                for j in 0..d {
                    b.feature_min[j] = b.feature_min[j].min(row[j]);
                    b.feature_max[j] = b.feature_max[j].max(row[j]);
                }
            }
        }
        Ok(b)
    }

    /// Bounds that never clip.
    pub fn unbounded(feature_dim: usize) -> Self {
        ClipBounds {
            position_min: [f64::NEG_INFINITY; 3],
            position_max: [f64::INFINITY; 3],
            feature_min: vec![f64::NEG_INFINITY; feature_dim],
            feature_max: vec![f64::INFINITY; feature_dim],
        }
    }

    pub fn clip_positions(&self, p: &mut Mat) {
        for mut row in p.rows_mut() {
            for c in 0..3 {
                row[c] = row[c].clamp(self.position_min[c], self.position_max[c]);
            }
        }
    }

    pub fn clip_features(&self, f: &mut Mat) {
        for mut row in f.rows_mut() {
            for j in 0..row.len() {
                row[j] = row[j].clamp(self.feature_min[j], self.feature_max[j]);
            }
        }
    }

    pub fn contains_positions(&self, p: &Mat) -> bool {
        p.rows()
            .into_iter()
            .all(|r| (0..3).all(|c| r[c] >= self.position_min[c] && r[c] <= self.position_max[c]))
    }

    pub fn contains_features(&self, f: &Mat) -> bool {
        f.rows()
            .into_iter()
            .all(|r| (0..r.len()).all(|j| r[j] >= self.feature_min[j] && r[j] <= self.feature_max[j]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud(pos: &[f64], feat: &[f64], d: usize) -> NeuralPointCloud {
        let m = pos.len() / 3;
        NeuralPointCloud::new(
            Mat::from_shape_vec((m, 3), pos.to_vec()).unwrap(),
            Mat::from_shape_vec((m, d), feat.to_vec()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn centered_unit_cloud() {
        // Unit vectors along +-x, +-y, +-z.
        let pos = [1., 0., 0., -1., 0., 0., 0., 1., 0., 0., -1., 0., 0., 0., 1., 0., 0., -1.];
        let raw = cloud(&pos, &[0.0; 6], 1);
        let s0 = compute_normalization(&[raw.clone()]).unwrap();
        // sum of squares 6 over 18 coordinates
        assert!((s0.position_scale - (6.0f64 / 18.0).sqrt()).abs() < 1e-15);
        let scaled = NeuralPointCloud::new(raw.positions() / s0.position_scale, raw.features().clone()).unwrap();
        let s = compute_normalization(&[scaled]).unwrap();
        assert!(s.position_mean.iter().all(|m| m.abs() < 1e-15));
        assert!((s.position_scale - 1.0).abs() < 1e-12);
    }

    #[test]
    fn feature_extremes() {
        let pc = cloud(&[0., 0., 0., 1., 1., 1.], &[-2.0, 0.5, 2.0, 0.25], 2);
        let s = compute_normalization(&[pc]).unwrap();
        assert_eq!(s.feature_min, vec![-2.0, 0.25]);
        assert_eq!(s.feature_max, vec![2.0, 0.5]);
    }

    #[test]
    fn two_clouds_hand_computed() {
        let a = cloud(&[0., 0., 0., 2., 0., 0., 0., 2., 0.], &[0.0; 3], 1);
        let b = cloud(&[0., 0., 2., 1., 1., 1., 3., 3., 3.], &[0.0; 3], 1);
        let s = compute_normalization(&[a, b]).unwrap();
        // x: 0,2,0,0,1,3 -> 1; y: 0,0,2,0,1,3 -> 1; z: 0,0,0,2,1,3 -> 1
        assert_eq!(s.position_mean, [1.0, 1.0, 1.0]);
        // squared deviations: x 1+1+1+1+0+4=8, y 8, z 1+1+1+1+0+4=8 -> 24 / 18
        assert!((s.position_scale - (24.0f64 / 18.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(matches!(compute_normalization(&[]), Err(Error::Argument(_))));
        let flat = cloud(&[1., 1., 1., 1., 1., 1.], &[0.0, 1.0], 1);
        assert!(matches!(compute_normalization(&[flat]), Err(Error::DegenerateData(_))));
        let pc = cloud(&[0., 0., 0., 1., 1., 1.], &[0.0; 4], 2);
        let s = compute_normalization(&[pc]).unwrap();
        let other = cloud(&[0., 0., 0.], &[0.0; 3], 3);
        assert!(matches!(normalize(&other, &s), Err(Error::Argument(_))));
    }

    #[test]
    fn anchors() {
        let pc = cloud(&[0., 0., 0., 2., 4., 6.], &[1.0, 3.0, 5.0, 3.0], 2);
        let s = compute_normalization(&[pc.clone()]).unwrap();
        let n = normalize(&pc, &s).unwrap();
        assert_eq!(n.features()[[1, 0]], 1.0);
        assert_eq!(n.features()[[0, 0]], -1.0);
        // constant dimension maps to 0 and back to the constant
        assert_eq!(n.features()[[0, 1]], 0.0);
        assert_eq!(denormalize(&n, &s).unwrap().features()[[1, 1]], 3.0);
        let at_mean = Mat::from_shape_vec((1, 3), s.position_mean.to_vec()).unwrap();
        assert!(s.normalize_positions(&at_mean).iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn round_trips(vals in proptest::collection::vec(-5.0f64..5.0, 40)) {
            let pos: Vec<f64> = vals[..24].to_vec();
            let feat: Vec<f64> = vals[24..40].to_vec();
            let pc = cloud(&pos, &feat, 2);
            let s = compute_normalization(&[pc.clone()]).unwrap();
            let n = normalize(&pc, &s).unwrap();
            let back = denormalize(&n, &s).unwrap();
            for (a, b) in back.positions().iter().zip(pc.positions()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in back.features().iter().zip(pc.features()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let again = normalize(&back, &s).unwrap();
            for (a, b) in again.features().iter().zip(n.features()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!(n.features().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        }

        #[test]
        fn pooled_statistics_after_normalizing(vals in proptest::collection::vec(-3.0f64..3.0, 48)) {
            let a = cloud(&vals[..12], &vals[12..16], 1);
            let b = cloud(&vals[16..40], &vals[40..48], 1);
            let s = compute_normalization(&[a.clone(), b.clone()]).unwrap();
            let na = normalize(&a, &s).unwrap();
            let nb = normalize(&b, &s).unwrap();
            let all: Vec<f64> = na.positions().iter().chain(nb.positions().iter()).copied().collect();
            let n = all.len() as f64;
            let mut mean = [0.0; 3];
            for (i, v) in all.iter().enumerate() { mean[i % 3] += v / (n / 3.0); }
            prop_assert!(mean.iter().all(|m| m.abs() < 1e-9));
            let var = all.iter().enumerate().map(|(i, v)| (v - mean[i % 3]).powi(2)).sum::<f64>() / n;
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
    }
}
