use super::denoiser::NoisePredictor;
use super::schedule::{reverse_step, NoiseSchedule};
use crate::diff::Mat;
use crate::error::{Error, Result};
use crate::point_cloud::{ClipBounds, NeuralPointCloud, NormalizationStats};
use crate::seeding::{self, standard_normal_mat};

/// Initial noise: positions (M x 3) then features (M x D).
pub(crate) const INIT_STREAM: u64 = 0;
/// Per reverse step: position noise then feature noise.
pub(crate) const REVERSE_STREAM: u64 = 1;
/// Re-noising and reverse noise inside resampling loops.
pub(crate) const RESAMPLE_STREAM: u64 = 2;

/// Instrumentation hooks for a sampling run. States are in normalized space.
pub trait SamplingObserver {
    fn denoiser_called(&mut self, _t: usize) {}
    /// The state `(P_t, F_t)` once it has been formed, for `t` from `T` down to 0.
    fn state(&mut self, _t: usize, _positions: &Mat, _features: &Mat) {}
    /// The fixed noise of the pinned modality in conditional sampling.
    fn pinned_noise(&mut self, _eps: &Mat) {}
}

impl SamplingObserver for () {}

/// Counts denoiser calls and optionally keeps every `every`-th state.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub calls: usize,
    /// 0 disables state recording.
    pub every: usize,
    pub states: Vec<(usize, Mat, Mat)>,
    pub pinned_noise: Option<Mat>,
}

impl Trace {
    pub fn recording(every: usize) -> Self {
        Self { every, ..Self::default() }
    }
}

impl SamplingObserver for Trace {
    fn denoiser_called(&mut self, _t: usize) {
        self.calls += 1;
    }

    fn state(&mut self, t: usize, positions: &Mat, features: &Mat) {
        if self.every > 0 && t % self.every == 0 {
            self.states.push((t, positions.clone(), features.clone()));
        }
    }

    fn pinned_noise(&mut self, eps: &Mat) {
        self.pinned_noise = Some(eps.clone());
    }
}

pub(crate) fn checked_predict<P: NoisePredictor + ?Sized>(
    predictor: &P,
    positions: &Mat,
    features: &Mat,
    t: usize,
    observer: &mut dyn SamplingObserver,
) -> Result<(Mat, Mat)> {
    let (ep, ef) = predictor.predict(positions, features, t)?;
    observer.denoiser_called(t);
    if ep.dim() != positions.dim() || ef.dim() != features.dim() {
        return Err(Error::dim(
            "noise prediction",
            format!("{:?} and {:?}", positions.dim(), features.dim()),
            format!("{:?} and {:?}", ep.dim(), ef.dim()),
        ));
    }
    Ok((ep, ef))
}

pub(crate) fn check_sampling_inputs(stats: &NormalizationStats, clip: &ClipBounds, num_points: usize) -> Result<usize> {
    let d = stats.feature_dim();
    if clip.feature_min.len() != d || clip.feature_max.len() != d {
        return Err(Error::dim("clip bounds", format!("{d} feature dims"), clip.feature_min.len()));
    }
    if num_points == 0 || d == 0 {
        return Err(Error::Argument("sampling needs at least one point and one feature dimension".into()));
    }
    Ok(d)
}

pub(crate) fn denormalized(stats: &NormalizationStats, positions: &Mat, features: &Mat) -> Result<NeuralPointCloud> {
    NeuralPointCloud::new(stats.denormalize_positions(positions), stats.denormalize_features(features))
}

/// Ancestral sampling from pure noise with clipping to `clip` (normalized
/// space) after every reverse step; the result is denormalized with `stats`.
pub fn sample_unconditional<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    stats: &NormalizationStats,
    clip: &ClipBounds,
    num_points: usize,
    seed: u64,
) -> Result<NeuralPointCloud> {
    sample_unconditional_traced(predictor, schedule, stats, clip, num_points, seed, &mut ())
}

pub fn sample_unconditional_traced<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    stats: &NormalizationStats,
    clip: &ClipBounds,
    num_points: usize,
    seed: u64,
    observer: &mut dyn SamplingObserver,
) -> Result<NeuralPointCloud> {
    let d = check_sampling_inputs(stats, clip, num_points)?;
    let m = num_points;
    let big_t = schedule.num_steps();
    let mut init = seeding::rng(seed, INIT_STREAM);
    let mut p = standard_normal_mat(m, 3, &mut init);
    let mut f = standard_normal_mat(m, d, &mut init);
    let mut rev = seeding::rng(seed, REVERSE_STREAM);
    observer.state(big_t, &p, &f);
    for t in (1..=big_t).rev() {
        let (ep, ef) = checked_predict(predictor, &p, &f, t, observer)?;
        let np = standard_normal_mat(m, 3, &mut rev);
        let nf = standard_normal_mat(m, d, &mut rev);
        p = reverse_step(&p, &ep, schedule, t, &np)?;
        clip.clip_positions(&mut p);
        f = reverse_step(&f, &ef, schedule, t, &nf)?;
        clip.clip_features(&mut f);
        observer.state(t - 1, &p, &f);
    }
    denormalized(stats, &p, &f)
}
