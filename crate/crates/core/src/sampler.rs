//! Conditional generation with one modality pinned: appearance-only sampling
//! keeps the given positions and generates features, shape-only sampling
//! keeps the given features and generates positions.
//!
//! The pinned modality follows its forward-process trajectory from the given
//! value with one fixed noise draw, except during the last `n_rev` steps where
//! it follows the reverse process. In the last `n_repaint` steps (while the
//! pinned modality is still on its forward trajectory) the free modality is
//! re-noised and re-denoised `n_resample` times per step.

use serde::{Deserialize, Serialize};

use crate::diff::Mat;
use crate::diffusion::{
    check_sampling_inputs, checked_predict, denormalized, forward_jump, forward_step, reverse_step, NoisePredictor,
    NoiseSchedule, SamplingObserver, INIT_STREAM, RESAMPLE_STREAM, REVERSE_STREAM,
};
use crate::error::{Error, Result};
use crate::point_cloud::{ClipBounds, NeuralPointCloud, NormalizationStats};
use crate::seeding::{self, standard_normal_mat};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_rev: usize,
    pub n_repaint: usize,
    pub n_resample: usize,
}

impl SamplerConfig {
    pub fn new(n_rev: usize, n_repaint: usize, n_resample: usize) -> Self {
        Self { n_rev, n_repaint, n_resample }
    }

    pub fn validate(&self, num_steps: usize) -> Result<()> {
        if self.n_rev > num_steps || self.n_repaint > num_steps {
            return Err(Error::Config(format!(
                "n_rev {} and n_repaint {} must not exceed T = {num_steps}",
                self.n_rev, self.n_repaint
            )));
        }
        Ok(())
    }

    /// Timesteps at which resampling loops run.
    pub fn resample_steps(&self, num_steps: usize) -> std::ops::RangeInclusive<usize> {
        self.n_rev.max(1)..=self.n_repaint.min(num_steps)
    }

    /// Closed-form number of denoiser evaluations for one sample.
    pub fn expected_denoiser_calls(&self, num_steps: usize) -> usize {
        num_steps + self.n_resample * self.resample_steps(num_steps).count()
    }
}

/// Which modality is given and held fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PinnedModality {
    /// Positions given, features generated.
    Positions,
    /// Features given, positions generated.
    Features,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Preset {
    pub name: &'static str,
    pub pinned: PinnedModality,
    pub config: SamplerConfig,
}

pub const PRESETS: [Preset; 4] = [
    Preset { name: "srn-chairs-appearance", pinned: PinnedModality::Positions, config: SamplerConfig { n_rev: 15, n_repaint: 50, n_resample: 10 } },
    Preset { name: "srn-cars-appearance", pinned: PinnedModality::Positions, config: SamplerConfig { n_rev: 15, n_repaint: 80, n_resample: 40 } },
    Preset { name: "chairs-shape", pinned: PinnedModality::Features, config: SamplerConfig { n_rev: 50, n_repaint: 100, n_resample: 2 } },
    Preset { name: "cars-shape", pinned: PinnedModality::Features, config: SamplerConfig { n_rev: 50, n_repaint: 0, n_resample: 0 } },
];

pub fn preset(name: &str) -> Result<Preset> {
    PRESETS.iter().copied().find(|p| p.name == name).ok_or_else(|| {
        let names: Vec<_> = PRESETS.iter().map(|p| p.name).collect();
        Error::Config(format!("unknown sampler preset '{name}', expected one of {names:?}"))
    })
}

/// The conditioning value of exactly one modality, in normalized space.
#[derive(Clone, Copy, Debug)]
pub enum Pinned<'a> {
    Positions(&'a Mat),
    Features(&'a Mat),
}

impl<'a> Pinned<'a> {
    /// Exactly one of the two must be given.
    pub fn from_options(positions: Option<&'a Mat>, features: Option<&'a Mat>) -> Result<Self> {
        match (positions, features) {
            (Some(p), None) => Ok(Pinned::Positions(p)),
            (None, Some(f)) => Ok(Pinned::Features(f)),
            (Some(_), Some(_)) => Err(Error::Argument("cannot pin both positions and features".into())),
            (None, None) => Err(Error::Argument("conditional sampling needs one pinned modality".into())),
        }
    }

    pub fn modality(&self) -> PinnedModality {
        match self {
            Pinned::Positions(_) => PinnedModality::Positions,
            Pinned::Features(_) => PinnedModality::Features,
        }
    }
}

pub fn appearance_only_sample<P: NoisePredictor + ?Sized>(
    predictor: &P,
    positions: &Mat,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    stats: &NormalizationStats,
    clip: &ClipBounds,
    seed: u64,
) -> Result<NeuralPointCloud> {
    disentangled_sample(predictor, Pinned::Positions(positions), schedule, config, stats, clip, seed, &mut ())
}

pub fn shape_only_sample<P: NoisePredictor + ?Sized>(
    predictor: &P,
    features: &Mat,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    stats: &NormalizationStats,
    clip: &ClipBounds,
    seed: u64,
) -> Result<NeuralPointCloud> {
    disentangled_sample(predictor, Pinned::Features(features), schedule, config, stats, clip, seed, &mut ())
}

/// Clips the matrix belonging to `pinned_slot` (true: the pinned modality).
fn clip_modality(clip: &ClipBounds, modality: PinnedModality, pinned_slot: bool, x: &mut Mat) {
    let is_positions = (modality == PinnedModality::Positions) == pinned_slot;
    if is_positions {
        clip.clip_positions(x);
    } else {
        clip.clip_features(x);
    }
}

/// Conditional sampling with instrumentation. `pinned` is in normalized space;
/// the output is denormalized with `stats`.
#[allow(clippy::too_many_arguments)]
pub fn disentangled_sample<P: NoisePredictor + ?Sized>(
    predictor: &P,
    pinned: Pinned<'_>,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    stats: &NormalizationStats,
    clip: &ClipBounds,
    seed: u64,
    observer: &mut dyn SamplingObserver,
) -> Result<NeuralPointCloud> {
    let big_t = schedule.num_steps();
    config.validate(big_t)?;
    let modality = pinned.modality();
    let (m, d) = match pinned {
        Pinned::Positions(p) => {
            if p.ncols() != 3 {
                return Err(Error::dim("pinned positions", "Mx3", format!("{:?}", p.dim())));
            }
            (p.nrows(), stats.feature_dim())
        }
        Pinned::Features(f) => {
            if f.ncols() != stats.feature_dim() {
                return Err(Error::dim("pinned features", format!("Mx{}", stats.feature_dim()), format!("{:?}", f.dim())));
            }
            (f.nrows(), f.ncols())
        }
    };
    check_sampling_inputs(stats, clip, m)?;
    let x0: &Mat = match pinned {
        Pinned::Positions(p) | Pinned::Features(p) => p,
    };
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("pinned modality has non-finite values".into()));
    }

    // Same draw order as unconditional sampling: positions, then features.
    let mut init = seeding::rng(seed, INIT_STREAM);
    let first = standard_normal_mat(m, 3, &mut init);
    let second = standard_normal_mat(m, d, &mut init);
    let (eps_pin, mut y) = match modality {
        PinnedModality::Positions => (first, second),
        PinnedModality::Features => (second, first),
    };
    observer.pinned_noise(&eps_pin);
    // With reverse takeover over the whole chain the pinned start is pure noise,
    // which makes the procedure coincide with unconditional sampling.
    let mut x = if config.n_rev == big_t { eps_pin.clone() } else { forward_jump(x0, schedule, big_t, &eps_pin)? };

    let mut rev = seeding::rng(seed, REVERSE_STREAM);
    let mut res = seeding::rng(seed, RESAMPLE_STREAM);
    let split = |x: &Mat, y: &Mat| -> (Mat, Mat) {
        match modality {
            PinnedModality::Positions => (x.clone(), y.clone()),
            PinnedModality::Features => (y.clone(), x.clone()),
        }
    };
    let pick = |ep: Mat, ef: Mat| -> (Mat, Mat) {
        match modality {
            PinnedModality::Positions => (ep, ef),
            PinnedModality::Features => (ef, ep),
        }
    };
    let free_cols = y.ncols();

    {
        let (p, f) = split(&x, &y);
        observer.state(big_t, &p, &f);
    }
    for t in (1..=big_t).rev() {
        let (p_t, f_t) = split(&x, &y);
        let (ep, ef) = checked_predict(predictor, &p_t, &f_t, t, observer)?;
        let (e_x, e_y) = pick(ep, ef);
        let np = standard_normal_mat(m, 3, &mut rev);
        let nf = standard_normal_mat(m, d, &mut rev);
        let (n_x, n_y) = pick(np, nf);

        let mut y_prev = reverse_step(&y, &e_y, schedule, t, &n_y)?;
        clip_modality(clip, modality, false, &mut y_prev);
        let x_prev = if t > config.n_rev {
            if t == 1 {
                x0.clone()
            } else {
                forward_jump(x0, schedule, t - 1, &eps_pin)?
            }
        } else {
            let mut v = reverse_step(&x, &e_x, schedule, t, &n_x)?;
            clip_modality(clip, modality, true, &mut v);
            v
        };

        if t <= config.n_repaint && t >= config.n_rev {
            for _ in 0..config.n_resample {
                let renoise = standard_normal_mat(m, free_cols, &mut res);
                let y_t = forward_step(&y_prev, schedule, t, &renoise)?;
                let (p_r, f_r) = split(&x, &y_t);
                let (ep, ef) = checked_predict(predictor, &p_r, &f_r, t, observer)?;
                let (_, e_y) = pick(ep, ef);
                let n = standard_normal_mat(m, free_cols, &mut res);
                y_prev = reverse_step(&y_t, &e_y, schedule, t, &n)?;
                clip_modality(clip, modality, false, &mut y_prev);
            }
        }
        x = x_prev;
        y = y_prev;
        let (p, f) = split(&x, &y);
        observer.state(t - 1, &p, &f);
    }
    let (p, f) = split(&x, &y);
    denormalized(stats, &p, &f)
}
