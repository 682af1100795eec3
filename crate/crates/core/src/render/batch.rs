use std::cmp::Ordering;

use rand::Rng;
use rayon::prelude::*;

use super::camera::{generate_rays, Camera, Ray};
use super::decoder::{aggregation_weights, DecoderParams};
use super::image::Image;
use super::neighbors::NeighborIndex;
use super::{depth_deltas, sample_depths, RenderConfig};
use crate::diff::{CompositeLayout, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::point_cloud::NeuralPointCloud;

/// Geometry of a set of rays against one cloud, independent of features
/// and decoder weights.
///
/// Only shading points with at least one neighbor are kept: the rest have zero
/// density and leave the composite unchanged.
#[derive(Clone, Debug)]
pub struct RayBatch {
    /// Cloud row of every (shading point, neighbor) pair.
    pub pair_points: Vec<usize>,
    /// `q - p` per pair.
    pub pair_offsets: Mat,
    /// Kept shading point of every pair.
    pub pair_samples: Vec<usize>,
    /// Normalized inverse-distance weight per pair.
    pub pair_weights: Vec<f64>,
    pub layout: CompositeLayout,
}

struct RayPairs {
    points: Vec<usize>,
    offsets: Vec<[f64; 3]>,
    samples_local: Vec<usize>,
    weights: Vec<f64>,
    deltas: Vec<f64>,
}

struct Candidate {
    index: usize,
    distance: f64,
    offset: [f64; 3],
}

/// Nearest first; equal distances by offset, then index, so the order does not
/// depend on how the cloud happens to be indexed.
fn canonical(a: &Candidate, b: &Candidate) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then_with(|| {
            (0..3)
                .map(|c| a.offset[c].total_cmp(&b.offset[c]))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then(a.index.cmp(&b.index))
}

fn march(ray: &Ray, depths: &[f64], far: f64, positions: &Mat, index: &NeighborIndex, cfg: &RenderConfig) -> RayPairs {
    let deltas = depth_deltas(depths, far);
    let mut out = RayPairs { points: Vec::new(), offsets: Vec::new(), samples_local: Vec::new(), weights: Vec::new(), deltas: Vec::new() };
    let mut found: Vec<Candidate> = Vec::new();
    let (o, d) = (ray.origin, ray.direction);
    for (s, &t) in depths.iter().enumerate() {
        let q = ray.at(t);
        found.clear();
        index.for_each_candidate(q, |i| {
            let off = [
                (o[0] - positions[[i, 0]]) + t * d[0],
                (o[1] - positions[[i, 1]]) + t * d[1],
                (o[2] - positions[[i, 2]]) + t * d[2],
            ];
            let dist = (off[0] * off[0] + off[1] * off[1] + off[2] * off[2]).sqrt();
            if dist <= cfg.neighbor_radius {
                found.push(Candidate { index: i, distance: dist, offset: off });
            }
        });
        if found.is_empty() {
            continue;
        }
        found.sort_by(canonical);
        found.truncate(cfg.neighbors_k);
        let dists: Vec<f64> = found.iter().map(|c| c.distance).collect();
        let local = out.deltas.len();
        out.deltas.push(deltas[s]);
        for (c, w) in found.iter().zip(aggregation_weights(&dists, cfg.distance_epsilon)) {
            out.points.push(c.index);
            out.offsets.push(c.offset);
            out.samples_local.push(local);
            out.weights.push(w);
        }
    }
    out
}

impl RayBatch {
    /// Marches `rays` through `[near, far]`. Depths are stratified with `rng`,
    /// or bin midpoints when `rng` is `None`.
    pub fn build<R: Rng + ?Sized>(
        positions: &Mat,
        index: &NeighborIndex,
        rays: &[Ray],
        near: f64,
        far: f64,
        cfg: &RenderConfig,
        mut rng: Option<&mut R>,
    ) -> Result<Self> {
        cfg.validate()?;
        if !(near < far) {
            return Err(Error::Argument(format!("need near < far, got {near} / {far}")));
        }
        if index.radius_capacity() < cfg.neighbor_radius {
            return Err(Error::Argument("neighbor index was built for a smaller radius".into()));
        }
        let depths: Vec<Vec<f64>> = rays
            .iter()
            .map(|_| sample_depths(near, far, cfg.shading_points_per_ray, rng.as_deref_mut()))
            .collect();
        let per_ray: Vec<RayPairs> = rays
            .par_iter()
            .zip(depths.par_iter())
            .map(|(ray, depths)| march(ray, depths, far, positions, index, cfg))
            .collect();

        let n_pairs: usize = per_ray.iter().map(|r| r.points.len()).sum();
        let mut batch = RayBatch {
            pair_points: Vec::with_capacity(n_pairs),
            pair_offsets: Mat::zeros((n_pairs, 3)),
            pair_samples: Vec::with_capacity(n_pairs),
            pair_weights: Vec::with_capacity(n_pairs),
            layout: CompositeLayout { rays: Vec::with_capacity(rays.len()), deltas: Vec::new(), background: cfg.background_color },
        };
        let mut row = 0;
        for r in per_ray {
            let base = batch.layout.deltas.len();
            batch.layout.rays.push(base..base + r.deltas.len());
            batch.layout.deltas.extend(r.deltas);
            for (k, off) in r.offsets.iter().enumerate() {
                batch.pair_offsets.row_mut(row).assign(&ndarray::ArrayView1::from(off));
                batch.pair_points.push(r.points[k]);
                batch.pair_samples.push(base + r.samples_local[k]);
                batch.pair_weights.push(r.weights[k]);
                row += 1;
            }
        }
        Ok(batch)
    }

    pub fn num_rays(&self) -> usize {
        self.layout.rays.len()
    }

    /// Shading points with at least one neighbor.
    pub fn num_samples(&self) -> usize {
        self.layout.deltas.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.pair_points.len()
    }
}

/// Pixel colors `R x 3` for `batch`, differentiable in `features` (`M x D`) and the decoder weights.
pub fn render_batch(tape: &mut Tape, decoder: &DecoderParams, features: Var, batch: &RayBatch) -> Result<Var> {
    let fdim = tape.value(features).ncols();
    if fdim != decoder.feature_dim() {
        return Err(Error::dim("render features", format!("{} columns", decoder.feature_dim()), fdim));
    }
    if batch.num_samples() == 0 {
        let bg = batch.layout.background;
        return Ok(tape.constant(Mat::from_shape_fn((batch.num_rays(), 3), |(_, c)| bg[c])));
    }
    let f = tape.gather_rows(features, batch.pair_points.clone())?;
    let off = tape.constant(batch.pair_offsets.clone());
    let x = tape.concat_cols(&[f, off])?;
    let h = decoder.aggregation.forward(tape, &decoder.store, x)?;
    let shading = tape.segment_sum(h, batch.pair_samples.clone(), batch.pair_weights.clone(), batch.num_samples())?;
    let (color, sigma) = decoder.decode(tape, shading)?;
    tape.composite(color, sigma, batch.layout.clone())
}

const IMAGE_CHUNK_RAYS: usize = 256;

/// Renders every pixel of `camera` with midpoint depths.
pub fn render_image(pc: &NeuralPointCloud, decoder: &DecoderParams, camera: &Camera, cfg: &RenderConfig) -> Result<Image> {
    cfg.validate()?;
    let index = NeighborIndex::build(pc.positions(), cfg.neighbor_radius)?;
    render_image_with_index(pc, &index, decoder, camera, cfg)
}

pub fn render_image_with_index(
    pc: &NeuralPointCloud,
    index: &NeighborIndex,
    decoder: &DecoderParams,
    camera: &Camera,
    cfg: &RenderConfig,
) -> Result<Image> {
    camera.validate()?;
    let rays = generate_rays(camera);
    let chunks: Vec<Result<Mat>> = rays
        .par_chunks(IMAGE_CHUNK_RAYS)
        .map(|chunk| {
            let batch = RayBatch::build::<rand_chacha::ChaCha8Rng>(pc.positions(), index, chunk, camera.near, camera.far, cfg, None)?;
            let mut tape = Tape::new();
            let f = tape.constant(pc.features().clone());
            let px = render_batch(&mut tape, decoder, f, &batch)?;
            Ok(tape.value(px).clone())
        })
        .collect();
    let mut data = Vec::with_capacity(rays.len() * 3);
    for c in chunks {
        data.extend(c?.iter().copied());
    }
    Image::new(camera.width, camera.height, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{grad_check, Precision};
    use crate::render::{integrate_ray, DecoderConfig, RaySample};
    use crate::render::{aggregate_feature, decode_radiance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn decoder(seed: u64, d: usize) -> DecoderParams {
        let cfg = DecoderConfig {
            feature_dim: d,
            hidden_width: 8,
            shading_dim: 6,
            aggregation_hidden_layers: 2,
            color_hidden_layers: 1,
            density_hidden_layers: 1,
            ..Default::default()
        };
        DecoderParams::init(cfg, Precision::F64, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn camera(eye: [f64; 3], w: usize) -> Camera {
        Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], w as f64, w, w, 0.5, 2.5).unwrap()
    }

    fn cloud(seed: u64, m: usize, d: usize) -> NeuralPointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = Mat::from_shape_fn((m, 3), |_| rng.gen_range(-0.3..0.3));
        let feat = Mat::from_shape_fn((m, d), |_| rng.gen_range(-1.0..1.0));
        NeuralPointCloud::new(pos, feat).unwrap()
    }

    fn cfg(radius: f64, s: usize) -> RenderConfig {
        RenderConfig { shading_points_per_ray: s, neighbor_radius: radius, ..Default::default() }
    }

    #[test]
    fn empty_scene_is_background() {
        let pc = cloud(1, 5, 3);
        let mut far_away = pc.positions().clone();
        far_away.mapv_inplace(|v| v + 100.0);
        let pc = NeuralPointCloud::new(far_away, pc.features().clone()).unwrap();
        let c = RenderConfig { background_color: [0.25, 0.5, 1.0], ..cfg(0.2, 16) };
        let img = render_image(&pc, &decoder(2, 3), &camera([0.0, -1.5, 0.0], 6), &c).unwrap();
        assert_eq!(img, Image::filled(6, 6, [0.25, 0.5, 1.0]));
    }

    #[test]
    fn batch_matches_per_sample_pipeline() {
        let pc = cloud(3, 12, 3);
        let dec = decoder(4, 3);
        let c = cfg(0.25, 24);
        let cam = camera([0.4, -1.4, 0.3], 5);
        let img = render_image(&pc, &dec, &cam, &c).unwrap();
        let index = NeighborIndex::build(pc.positions(), c.neighbor_radius).unwrap();
        for v in 0..5 {
            for u in 0..5 {
                let ray = cam.ray(u, v);
                let depths = sample_depths::<ChaCha8Rng>(cam.near, cam.far, c.shading_points_per_ray, None);
                let samples: Vec<RaySample> = depths
                    .iter()
                    .map(|&t| {
                        let q = ray.at(t);
                        let n = index.query(pc.positions(), q, c.neighbors_k, c.neighbor_radius);
                        let f = (!n.is_empty())
                            .then(|| aggregate_feature(&dec.aggregation, &dec.store, pc.positions(), pc.features(), q, &n, 1e-8).unwrap());
                        let (color, density) = decode_radiance(&dec, f.as_deref(), c.background_color).unwrap();
                        RaySample { color, density, depth: t }
                    })
                    .collect();
                let px = integrate_ray(&samples, cam.far, c.background_color).unwrap();
                let got = img.pixel(u, v);
                for k in 0..3 {
                    assert!((px[k] - got[k]).abs() < 1e-12, "pixel ({u},{v}): {px:?} vs {got:?}");
                }
            }
        }
    }

    #[test]
    fn joint_translation_is_bit_identical() {
        // Dyadic coordinates keep every translated subtraction exact.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pos = Mat::from_shape_fn((10, 3), |_| rng.gen_range(-16i32..16) as f64 / 64.0);
        let feat = Mat::from_shape_fn((10, 2), |_| rng.gen_range(-1.0..1.0));
        let pc = NeuralPointCloud::new(pos.clone(), feat.clone()).unwrap();
        let shift = [0.5, -1.25, 2.0];
        let moved = NeuralPointCloud::new(&pos + &ndarray::arr1(&shift), feat).unwrap();
        let dec = decoder(6, 2);
        let c = cfg(0.2, 32);
        let cam = Camera::look_at([0.0, -1.5, 0.0], [0.0; 3], [0.0, 0.0, 1.0], 6.0, 6, 6, 0.5, 2.5).unwrap();
        let mut cam2 = cam.clone();
        for k in 0..3 {
            cam2.translation[k] += shift[k];
        }
        let a = render_image(&pc, &dec, &cam, &c).unwrap();
        let b = render_image(&moved, &dec, &cam2, &c).unwrap();
        assert!(a.data.iter().any(|&v| v != 1.0));
        assert_eq!(a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn permutation_is_bit_identical() {
        let pc = cloud(7, 20, 3);
        let perm: Vec<usize> = (0..20).rev().collect();
        let dec = decoder(8, 3);
        let c = cfg(0.2, 32);
        let cam = camera([0.2, -1.5, 0.1], 6);
        let a = render_image(&pc, &dec, &cam, &c).unwrap();
        let b = render_image(&pc.permuted(&perm).unwrap(), &dec, &cam, &c).unwrap();
        assert!(a.data.iter().any(|&v| v != 1.0));
        assert_eq!(a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn render_mse_gradient_matches_finite_differences() {
        let pos = Mat::from_shape_vec((2, 3), vec![0.05, 0.0, 0.02, -0.06, 0.03, -0.04]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let feat = Mat::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));
        let target = Mat::from_shape_fn((16, 3), |_| rng.gen_range(0.0..1.0));
        let dec = decoder(10, 3);
        let c = cfg(0.3, 16);
        let cam = Camera::look_at([0.0, -1.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0], 8.0, 4, 4, 0.5, 1.5).unwrap();
        let index = NeighborIndex::build(&pos, c.neighbor_radius).unwrap();
        let batch = RayBatch::build::<ChaCha8Rng>(&pos, &index, &generate_rays(&cam), cam.near, cam.far, &c, None).unwrap();
        assert!(batch.num_samples() > 0);
        let report = grad_check(
            |t, f| {
                let px = render_batch(t, &dec, f, &batch)?;
                t.mse(px, &target)
            },
            &feat,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{}", report.max_rel_error);
    }

    #[test]
    fn stratified_batches_depend_on_seed_only() {
        let pc = cloud(11, 30, 2);
        let c = cfg(0.2, 16);
        let cam = camera([0.0, -1.5, 0.0], 4);
        let rays = generate_rays(&cam);
        let index = NeighborIndex::build(pc.positions(), 0.2).unwrap();
        let build = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            RayBatch::build(pc.positions(), &index, &rays, cam.near, cam.far, &c, Some(&mut rng)).unwrap()
        };
        assert_eq!(build(1).layout.deltas, build(1).layout.deltas);
        assert_ne!(build(1).layout.deltas, build(2).layout.deltas);
    }

    #[test]
    fn feature_width_mismatch() {
        let pc = cloud(12, 4, 2);
        assert!(matches!(render_image(&pc, &decoder(1, 3), &camera([0.0, -1.5, 0.0], 2), &cfg(0.2, 4)), Err(Error::Dimension { .. })));
    }
}
