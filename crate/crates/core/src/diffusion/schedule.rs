use serde::{Deserialize, Serialize};

use crate::diff::Mat;
use crate::error::{Error, Result};

/// Per-timestep noise tables, indexed by `t` in `1..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Betas interpolated linearly from `beta_start` (t = 1) to `beta_end` (t = T).
pub fn linear_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(Error::Config("diffusion needs at least one timestep".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "beta range must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas = (0..t_max)
        .map(|i| {
            if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    /// Arbitrary betas in `[0, 1)`; zero betas are allowed for synthetic checks.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("diffusion needs at least one timestep".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(Error::Config(format!("beta {b} outside [0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::Argument(format!("timestep {t} outside 1..={}", self.num_steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product up to `t`; 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Standard deviation of the reverse-step noise; zero at `t = 1`.
    pub fn sigma(&self, t: usize) -> f64 {
        let beta = self.beta(t);
        if t == 1 || beta == 0.0 {
            return 0.0;
        }
        ((1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * beta).sqrt()
    }
}

fn check_pair(x: &Mat, noise: &Mat, what: &str) -> Result<()> {
    if x.dim() != noise.dim() {
        return Err(Error::dim(what, format!("noise of shape {:?}", x.dim()), format!("{:?}", noise.dim())));
    }
    Ok(())
}

/// One Markov noising step from `x_{t-1}` to `x_t`.
pub fn forward_step(x_prev: &Mat, schedule: &NoiseSchedule, t: usize, noise: &Mat) -> Result<Mat> {
    schedule.check_t(t)?;
    check_pair(x_prev, noise, "forward_step")?;
    let beta = schedule.beta(t);
    let (a, b) = ((1.0 - beta).sqrt(), beta.sqrt());
    Ok(ndarray::Zip::from(x_prev).and(noise).map_collect(|&x, &n| a * x + b * n))
}

/// Direct sample of `x_t` given `x_0`.
pub fn forward_jump(x0: &Mat, schedule: &NoiseSchedule, t: usize, noise: &Mat) -> Result<Mat> {
    schedule.check_t(t)?;
    check_pair(x0, noise, "forward_jump")?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(ndarray::Zip::from(x0).and(noise).map_collect(|&x, &n| a * x + b * n))
}

/// One ancestral step from `x_t` to `x_{t-1}` with fixed variance.
pub fn reverse_step(x_t: &Mat, eps_pred: &Mat, schedule: &NoiseSchedule, t: usize, noise: &Mat) -> Result<Mat> {
    schedule.check_t(t)?;
    check_pair(x_t, eps_pred, "reverse_step prediction")?;
    check_pair(x_t, noise, "reverse_step")?;
    let beta = schedule.beta(t);
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let coef = if beta == 0.0 { 0.0 } else { beta / (1.0 - schedule.alpha_bar(t)).sqrt() };
    let sigma = schedule.sigma(t);
    Ok(ndarray::Zip::from(x_t)
        .and(eps_pred)
        .and(noise)
        .map_collect(|&x, &e, &n| inv_sqrt_alpha * (x - coef * e) + sigma * n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::{self, standard_normal_mat};

    fn paper_schedule() -> NoiseSchedule {
        linear_schedule(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn linear_endpoints() {
        let s = paper_schedule();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 0.02);
        assert_eq!(s.alpha(1), 1.0 - 1e-4);
        assert!(s.betas().windows(2).all(|w| w[0] <= w[1]));
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        for t in 2..=1000 {
            assert_eq!(s.alpha_bar(t), s.alpha(t) * s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn final_alpha_bar_golden() {
        // Product accumulated in log space with compensated summation.
        let s = paper_schedule();
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for t in 1..=1000 {
            let y = (-s.beta(t)).ln_1p() - comp;
            let next = sum + y;
            comp = (next - sum) - y;
            sum = next;
        }
        let oracle = sum.exp();
        assert!((s.alpha_bar(1000) - oracle).abs() / oracle < 1e-12);
        // 50-digit reference value of the same product.
        let golden = 4.035_829_765_375_683_3e-5;
        assert!((s.alpha_bar(1000) - golden).abs() / golden < 1e-12);
    }

    #[test]
    fn invalid_ranges() {
        assert!(matches!(linear_schedule(10, 0.0, 0.1), Err(Error::Config(_))));
        assert!(matches!(linear_schedule(10, 0.2, 0.1), Err(Error::Config(_))));
        assert!(matches!(linear_schedule(10, 0.1, 1.0), Err(Error::Config(_))));
        assert!(matches!(linear_schedule(0, 0.1, 0.2), Err(Error::Config(_))));
    }

    #[test]
    fn forward_step_examples() {
        let s = NoiseSchedule::from_betas(vec![0.02, 0.0]).unwrap();
        let x = Mat::from_elem((1, 1), 1.0);
        let one = Mat::from_elem((1, 1), 1.0);
        let zero = Mat::zeros((1, 1));
        assert_eq!(forward_step(&x, &s, 1, &zero).unwrap()[[0, 0]], 0.98f64.sqrt());
        assert!((forward_step(&x, &s, 1, &one).unwrap()[[0, 0]] - 1.131).abs() < 1e-3);
        assert_eq!(forward_step(&x, &s, 2, &one).unwrap(), x);
        assert!(forward_step(&x, &s, 3, &one).is_err());
    }

    #[test]
    fn forward_jump_examples() {
        let s = paper_schedule();
        let x = Mat::from_elem((1, 1), 1.0);
        let zero = Mat::zeros((1, 1));
        assert_eq!(forward_jump(&x, &s, 7, &zero).unwrap()[[0, 0]], s.alpha_bar(7).sqrt());
        let v = forward_jump(&x, &s, 1, &Mat::from_elem((1, 1), 1.0)).unwrap()[[0, 0]];
        assert!((v - 1.00995).abs() < 1e-5);
    }

    #[test]
    fn reverse_step_examples() {
        let zero_sched = NoiseSchedule::from_betas(vec![0.0, 0.0]).unwrap();
        let x = Mat::from_elem((2, 2), 0.7);
        let e = Mat::from_elem((2, 2), 3.0);
        let n = Mat::from_elem((2, 2), -1.0);
        assert_eq!(reverse_step(&x, &e, &zero_sched, 2, &n).unwrap(), x);

        let s = paper_schedule();
        assert_eq!(s.sigma(1), 0.0);
        let at1 = reverse_step(&x, &e, &s, 1, &n).unwrap();
        let at1_other_noise = reverse_step(&x, &e, &s, 1, &(n.clone() * 5.0)).unwrap();
        assert_eq!(at1, at1_other_noise);

        // Independent evaluation at t = 2 from the raw betas.
        let (b1, b2): (f64, f64) = (1e-4, 1e-4 + (0.02 - 1e-4) / 999.0);
        let ab1 = 1.0 - b1;
        let ab2 = ab1 * (1.0 - b2);
        let sigma = ((1.0 - ab1) / (1.0 - ab2) * b2).sqrt();
        let one = Mat::from_elem((1, 1), 1.0);
        let got = reverse_step(&one, &Mat::zeros((1, 1)), &s, 2, &one).unwrap()[[0, 0]];
        let want = 1.0 / (1.0 - b2).sqrt() + sigma;
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }

    fn mean_var(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn iterated_and_jump_marginals_agree() {
        let s = paper_schedule();
        let trials = 4000;
        let x0 = Mat::from_elem((trials, 1), 0.8);
        for t in [1usize, 10, 100] {
            let mut rng = seeding::rng(9, t as u64);
            let mut x = x0.clone();
            for k in 1..=t {
                x = forward_step(&x, &s, k, &standard_normal_mat(trials, 1, &mut rng)).unwrap();
            }
            let y = forward_jump(&x0, &s, t, &standard_normal_mat(trials, 1, &mut rng)).unwrap();
            let (ma, va) = mean_var(x.as_slice().unwrap());
            let (mb, vb) = mean_var(y.as_slice().unwrap());
            let se_mean = ((va + vb) / trials as f64).sqrt();
            assert!((ma - mb).abs() < 5.0 * se_mean, "t={t}: means {ma} {mb}");
            let se_var = (2.0 * (va * va + vb * vb) / (trials as f64 - 1.0)).sqrt();
            assert!((va - vb).abs() < 5.0 * se_var, "t={t}: vars {va} {vb}");
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let s = paper_schedule();
        assert!(matches!(forward_jump(&Mat::zeros((2, 3)), &s, 1, &Mat::zeros((3, 2))), Err(Error::Dimension { .. })));
    }
}
