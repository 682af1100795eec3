
use crate::diff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::point_cloud::{NeuralPointCloud, VariationalNeuralPointCloud};
use crate::render::{DecoderParams, RayBatch, render_batch};
use crate::seeding::{self, standard_normal_mat};

/// Directed k-nearest-neighbor graph over cloud positions with inverse distances.
#[derive(Clone, Debug)]
pub struct TvGraph {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub inv_dist: Vec<f64>,
}

impl TvGraph {
    pub fn build(positions: &Mat, k: usize, distance_epsilon: f64) -> Result<Self> {
        let m = positions.nrows();
        if m < 2 {
            return Err(Error::Argument("TV needs at least two points".into()));
        }
        if k == 0 {
            return Err(Error::Argument("TV neighborhood must be at least 1".into()));
        }
        let k = k.min(m - 1);
        let mut g = TvGraph { src: Vec::with_capacity(m * k), dst: Vec::with_capacity(m * k), inv_dist: Vec::with_capacity(m * k) };
        let mut d: Vec<(f64, usize)> = Vec::with_capacity(m);
        for i in 0..m {
            d.clear();
            for j in (0..m).filter(|&j| j != i) {
                let s: f64 = (0..3).map(|c| (positions[[i, c]] - positions[[j, c]]).powi(2)).sum();
                d.push((s.sqrt(), j));
            }
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(dist, j) in &d[..k] {
                if dist <= distance_epsilon {
                    return Err(Error::DegenerateGeometry(format!("points {i} and {j} coincide")));
                }
                g.src.push(i);
                g.dst.push(j);
                g.inv_dist.push(1.0 / dist);
            }
        }
        Ok(g)
    }
}

/// `lambda * sum over edges (i, n) of |f_i - f_n|_1 / |p_i - p_n|`.
pub fn tv_loss_on_tape(tape: &mut Tape, features: Var, graph: &TvGraph, lambda: f64) -> Result<Var> {
    let d = tape.value(features).ncols();
    let a = tape.gather_rows(features, graph.src.clone())?;
    let b = tape.gather_rows(features, graph.dst.clone())?;
    let diff = tape.sub(a, b)?;
    let abs = tape.abs(diff);
    let w = Mat::from_shape_fn((graph.src.len(), d), |(e, _)| graph.inv_dist[e]);
    let weighted = tape.mul_const(abs, w)?;
    let s = tape.sum(weighted);
    Ok(tape.scale(s, lambda))
}

/// `lambda * sum_i KL(N(mu_i, diag sigma_i^2) || N(0, I))`. A single log-variance
/// column is shared across all feature dimensions.
pub fn kl_loss_on_tape(tape: &mut Tape, means: Var, log_variances: Var, lambda: f64) -> Result<Var> {
    let (m, d) = tape.value(means).dim();
    let (lm, ld) = tape.value(log_variances).dim();
    if lm != m || (ld != d && ld != 1) {
        return Err(Error::dim("kl log_variances", format!("{m}x{d} or {m}x1"), format!("{lm}x{ld}")));
    }
    let repeat = if ld == d { 1.0 } else { d as f64 };
    let mu2 = tape.square(means);
    let mu2 = tape.sum(mu2);
    let var = tape.exp(log_variances);
    let t = tape.sub(var, log_variances)?;
    let t = tape.sum(t);
    let t = tape.scale(t, repeat);
    let total = tape.add(mu2, t)?;
    // The constant -1 per (point, dimension).
    let total = tape.add_scalar(total, -((m * d) as f64));
    Ok(tape.scale(total, 0.5 * lambda))
}

/// `mu + exp(log_var / 2) * eps`, broadcasting a single log-variance column.
pub fn reparameterize_on_tape(tape: &mut Tape, means: Var, log_variances: Var, eps: Mat) -> Result<Var> {
    let (m, d) = tape.value(means).dim();
    if eps.dim() != (m, d) {
        return Err(Error::dim("reparameterize noise", format!("{m}x{d}"), format!("{:?}", eps.dim())));
    }
    let half = tape.scale(log_variances, 0.5);
    let mut sigma = tape.exp(half);
    let ld = tape.value(sigma).ncols();
    if ld == 1 && d != 1 {
        let ones = tape.constant(Mat::ones((1, d)));
        sigma = tape.matmul(sigma, ones)?;
    } else if ld != d {
        return Err(Error::dim("reparameterize log_variances", format!("{m}x{d} or {m}x1"), format!("{m}x{ld}")));
    }
    let noise = tape.mul_const(sigma, eps)?;
    tape.add(means, noise)
}

/// Mean squared error between rendered and target pixel colors.
pub fn reconstruction_loss_on_tape(tape: &mut Tape, decoder: &DecoderParams, features: Var, batch: &RayBatch, target: &Mat) -> Result<Var> {
    let px = render_batch(tape, decoder, features, batch)?;
    tape.mse(px, target)
}

/// Mean squared error between two equally sized pixel sets.
pub fn pixel_mse(rendered: &Mat, target: &Mat) -> Result<f64> {
    if rendered.dim() != target.dim() {
        return Err(Error::dim("pixel mse", format!("{:?}", target.dim()), format!("{:?}", rendered.dim())));
    }
    Ok((rendered - target).mapv(|v| v * v).mean().unwrap_or(0.0))
}

pub fn tv_loss(pc: &NeuralPointCloud, lambda: f64, k: usize) -> Result<f64> {
    let graph = TvGraph::build(pc.positions(), k, 1e-8)?;
    let mut tape = Tape::new();
    let f = tape.constant(pc.features().clone());
    let l = tv_loss_on_tape(&mut tape, f, &graph, lambda)?;
    Ok(tape.scalar(l))
}

pub fn kl_loss(vpc: &VariationalNeuralPointCloud, lambda: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let mu = tape.constant(vpc.means.clone());
    let lv = tape.constant(vpc.log_variances.clone());
    let l = kl_loss_on_tape(&mut tape, mu, lv, lambda)?;
    Ok(tape.scalar(l))
}


/// One draw `mu + sigma * eps` with `eps` from `seed`.
pub fn reparameterize_sample(vpc: &VariationalNeuralPointCloud, seed: u64) -> Result<NeuralPointCloud> {
    let (m, d) = vpc.means.dim();
    let eps = standard_normal_mat(m, d, &mut seeding::rng(seed, 0));
    let mut tape = Tape::new();
    let mu = tape.constant(vpc.means.clone());
    let lv = tape.constant(vpc.log_variances.clone());
    let f = reparameterize_on_tape(&mut tape, mu, lv, eps)?;
    NeuralPointCloud::new(vpc.positions.clone(), tape.value(f).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::grad_check;
    use crate::point_cloud::VarianceMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tv_identical_features_is_zero() {
        let pos = Mat::from_shape_fn((5, 3), |(i, c)| (i * 3 + c) as f64 * 0.1 + (i * i) as f64 * 0.01);
        let pc = NeuralPointCloud::new(pos, Mat::from_elem((5, 4), 0.7)).unwrap();
        assert_eq!(tv_loss(&pc, 1.0, 3).unwrap(), 0.0);
    }

    #[test]
    fn tv_two_points_both_directions() {
        let pos = Mat::from_shape_vec((2, 3), vec![0.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
        let feat = Mat::from_shape_vec((2, 2), vec![1.0, 0.0, 5.0, 0.0]).unwrap();
        let pc = NeuralPointCloud::new(pos, feat).unwrap();
        assert_eq!(tv_loss(&pc, 1.0, 1).unwrap(), 4.0);
    }

    #[test]
    fn tv_is_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pos = Mat::from_shape_fn((8, 3), |_| rng.gen_range(-1.0..1.0));
        let feat = Mat::from_shape_fn((8, 3), |_| rng.gen_range(-1.0..1.0));
        let a = tv_loss(&NeuralPointCloud::new(pos.clone(), feat.clone()).unwrap(), 0.5, 3).unwrap();
        let b = tv_loss(&NeuralPointCloud::new(pos, &feat * 2.5).unwrap(), 0.5, 3).unwrap();
        assert!((b - 2.5 * a).abs() < 1e-12 * b.abs());
    }

    #[test]
    fn tv_coincident_points_rejected() {
        let pos = Mat::from_shape_vec((3, 3), vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let pc = NeuralPointCloud::zero_init(pos, 1).unwrap();
        assert!(matches!(tv_loss(&pc, 1.0, 1), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn kl_closed_form() {
        let pos = Mat::zeros((1, 3));
        let v = VariationalNeuralPointCloud::standard(pos.clone(), 1, VarianceMode::Diagonal).unwrap();
        assert_eq!(kl_loss(&v, 1.0).unwrap(), 0.0);
        let v = VariationalNeuralPointCloud::new(pos.clone(), Mat::from_elem((1, 1), 1.0), Mat::zeros((1, 1))).unwrap();
        assert_eq!(kl_loss(&v, 1.0).unwrap(), 0.5);
        let small = VariationalNeuralPointCloud::new(pos.clone(), Mat::zeros((1, 1)), Mat::from_elem((1, 1), -10.0)).unwrap();
        let smaller = VariationalNeuralPointCloud::new(pos, Mat::zeros((1, 1)), Mat::from_elem((1, 1), -20.0)).unwrap();
        assert!(kl_loss(&smaller, 1.0).unwrap() > kl_loss(&small, 1.0).unwrap() + 4.0);
    }

    #[test]
    fn kl_scalar_mode_matches_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pos = Mat::zeros((3, 3));
        let mu = Mat::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let lv = Mat::from_shape_fn((3, 1), |_| rng.gen_range(-1.0..1.0));
        let lv_full = Mat::from_shape_fn((3, 4), |(i, _)| lv[[i, 0]]);
        let a = kl_loss(&VariationalNeuralPointCloud::new(pos.clone(), mu.clone(), lv).unwrap(), 0.3).unwrap();
        let b = kl_loss(&VariationalNeuralPointCloud::new(pos, mu, lv_full).unwrap(), 0.3).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn reparameterize_deterministic_and_collapses() {
        let pos = Mat::zeros((2, 3));
        let mu = Mat::from_shape_vec((2, 2), vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let v = VariationalNeuralPointCloud::new(pos.clone(), mu.clone(), Mat::zeros((2, 2))).unwrap();
        assert_eq!(reparameterize_sample(&v, 3).unwrap(), reparameterize_sample(&v, 3).unwrap());
        assert_ne!(reparameterize_sample(&v, 3).unwrap(), reparameterize_sample(&v, 4).unwrap());
        // At the log-variance floor the draw sits on the mean up to sigma = e^-10.
        let tight = VariationalNeuralPointCloud::new(pos, mu.clone(), Mat::from_elem((2, 2), -20.0)).unwrap();
        let f = reparameterize_sample(&tight, 3).unwrap();
        assert!(f.features().iter().zip(mu.iter()).all(|(a, b)| (a - b).abs() < 1e-3));
    }

    #[test]
    fn reparameterize_sample_mean_clt() {
        let pos = Mat::zeros((10_000, 3));
        let v = VariationalNeuralPointCloud::new(pos, Mat::from_elem((10_000, 1), 0.7), Mat::from_elem((10_000, 1), 2f64.ln())).unwrap();
        let f = reparameterize_sample(&v, 9).unwrap();
        let mean = f.features().mean().unwrap();
        let sigma = 2f64.sqrt();
        assert!((mean - 0.7).abs() < 5.0 * sigma / 100.0, "{mean}");
    }

    #[test]
    fn tv_and_kl_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pos = Mat::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let graph = TvGraph::build(&pos, 2, 1e-8).unwrap();
        let feat = Mat::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let r = grad_check(|t, f| tv_loss_on_tape(t, f, &graph, 0.7), &feat, 1e-4).unwrap();
        assert!(r.passed, "{}", r.max_rel_error);

        let lv = Mat::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let r = grad_check(
            |t, mu| {
                let l = t.constant(lv.clone());
                kl_loss_on_tape(t, mu, l, 0.3)
            },
            &feat,
            1e-4,
        )
        .unwrap();
        assert!(r.passed);
        let r = grad_check(
            |t, l| {
                let mu = t.constant(feat.clone());
                kl_loss_on_tape(t, mu, l, 0.3)
            },
            &lv,
            1e-4,
        )
        .unwrap();
        assert!(r.passed);
        let eps = Mat::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let r = grad_check(
            |t, l| {
                let mu = t.constant(feat.clone());
                let f = reparameterize_on_tape(t, mu, l, eps.clone())?;
                let sq = t.square(f);
                Ok(t.sum(sq))
            },
            &Mat::from_shape_fn((4, 1), |(i, _)| 0.1 * i as f64),
            1e-4,
        )
        .unwrap();
        assert!(r.passed);
    }

    #[test]
    fn mse_formula() {
        let a = Mat::from_shape_vec((4, 3), (0..12).map(|i| i as f64 / 12.0).collect()).unwrap();
        let b = Mat::from_shape_vec((4, 3), (0..12).map(|i| ((i * 5) % 12) as f64 / 12.0).collect()).unwrap();
        let direct: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 12.0;
        assert!((pixel_mse(&a, &b).unwrap() - direct).abs() < 1e-15);
        assert_eq!(pixel_mse(&Mat::zeros((4, 3)), &Mat::ones((4, 3))).unwrap(), 1.0);
        assert_eq!(pixel_mse(&a, &a).unwrap(), 0.0);
    }
}
