use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::denoiser::{Denoiser, NoisePredictor};
use super::schedule::{forward_jump, NoiseSchedule};
use super::DiffusionConfig;
use crate::diff::{adam_step, load_params, save_params, AdamConfig, Gradients, Mat, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::point_cloud::NeuralPointCloud;
use crate::seeding::{self, standard_normal_mat};

const STEP_TAG: u64 = 0x4446_5354;
const INIT_TAG: u64 = 0x4446_494e;
/// Normalized values beyond this magnitude suggest the data was not normalized.
pub const UNNORMALIZED_LIMIT: f64 = 10.0;

/// Timestep and noise drawn for one training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingDraw {
    pub t: usize,
    pub eps_positions: Mat,
    pub eps_features: Mat,
}

/// The draws `training_loss` makes for a batch of clouds with these shapes.
pub fn training_draws(shapes: &[(usize, usize)], num_steps: usize, seed: u64) -> Vec<TrainingDraw> {
    let mut rng = seeding::rng(seed, 0);
    shapes
        .iter()
        .map(|&(m, d)| {
            let t = rng.gen_range(1..=num_steps);
            let eps_positions = standard_normal_mat(m, 3, &mut rng);
            let eps_features = standard_normal_mat(m, d, &mut rng);
            TrainingDraw { t, eps_positions, eps_features }
        })
        .collect()
}

fn warn_if_unnormalized(batch: &[NeuralPointCloud]) {
    let max = batch
        .iter()
        .flat_map(|pc| pc.positions().iter().chain(pc.features().iter()))
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if max > UNNORMALIZED_LIMIT {
        log::warn!("diffusion input has |value| = {max:.3} > {UNNORMALIZED_LIMIT}; clouds look unnormalized");
    }
}

fn mse(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Mean over the batch of the average of the position and feature noise MSEs.
pub fn training_loss<P: NoisePredictor + ?Sized>(
    predictor: &P,
    batch: &[NeuralPointCloud],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Argument("training batch is empty".into()));
    }
    warn_if_unnormalized(batch);
    let shapes: Vec<_> = batch.iter().map(|pc| (pc.num_points(), pc.feature_dim())).collect();
    let draws = training_draws(&shapes, schedule.num_steps(), seed);
    let mut total = 0.0;
    for (pc, draw) in batch.iter().zip(&draws) {
        let pt = forward_jump(pc.positions(), schedule, draw.t, &draw.eps_positions)?;
        let ft = forward_jump(pc.features(), schedule, draw.t, &draw.eps_features)?;
        let (ep, ef) = predictor.predict(&pt, &ft, draw.t)?;
        if ep.dim() != pt.dim() || ef.dim() != ft.dim() {
            return Err(Error::dim("noise prediction", format!("{:?} and {:?}", pt.dim(), ft.dim()), format!("{:?} and {:?}", ep.dim(), ef.dim())));
        }
        total += 0.5 * (mse(&ep, &draw.eps_positions) + mse(&ef, &draw.eps_features));
    }
    Ok(total / batch.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiffusionLossRecord {
    pub step: u64,
    pub loss: f64,
}

/// Denoiser training state: live parameters, EMA copy, step counter and loss history.
#[derive(Clone, Debug)]
pub struct DiffusionTrainer {
    pub config: DiffusionConfig,
    pub schedule: NoiseSchedule,
    pub model: Denoiser,
    pub ema: ParamStore,
    pub step: u64,
    pub history: Vec<DiffusionLossRecord>,
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    config: DiffusionConfig,
    step: u64,
    history: Vec<DiffusionLossRecord>,
}

/// `ema <- decay * ema + (1 - decay) * params`.
pub fn ema_update(ema: &mut ParamStore, params: &ParamStore, decay: f64) -> Result<()> {
    ema.ema_update(params, decay)
}

impl DiffusionTrainer {
    pub fn new(config: DiffusionConfig) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule()?;
        let model = Denoiser::init(config.denoiser.clone(), config.precision, &mut seeding::rng_for(config.seed, INIT_TAG, 0))?;
        let ema = model.store.values_only();
        Ok(Self { config, schedule, model, ema, step: 0, history: Vec::new() })
    }

    fn check_data(&self, data: &[NeuralPointCloud]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Argument("diffusion training set is empty".into()));
        }
        let want = (self.config.denoiser.num_points, self.config.denoiser.feature_dim);
        if let Some(pc) = data.iter().find(|pc| (pc.num_points(), pc.feature_dim()) != want) {
            return Err(Error::dim(
                "diffusion training cloud",
                format!("{} points with {} features", want.0, want.1),
                format!("{} points with {} features", pc.num_points(), pc.feature_dim()),
            ));
        }
        Ok(())
    }

    /// Decay actually applied at the current step.
    pub fn effective_ema_decay(&self) -> f64 {
        if self.config.ema_warmup {
            let n = self.step as f64;
            self.config.ema_decay.min((1.0 + n) / (10.0 + n))
        } else {
            self.config.ema_decay
        }
    }

    /// One optimizer step on a batch drawn (with replacement) from `data`,
    /// which must already be normalized.
    pub fn train_step(&mut self, data: &[NeuralPointCloud]) -> Result<DiffusionLossRecord> {
        self.check_data(data)?;
        let step_seed = seeding::mix(self.config.seed, STEP_TAG, self.step);
        let mut pick = seeding::rng(step_seed, 1);
        let batch: Vec<&NeuralPointCloud> = (0..self.config.batch_size).map(|_| &data[pick.gen_range(0..data.len())]).collect();
        if self.step == 0 {
            warn_if_unnormalized(data);
        }
        let shapes: Vec<_> = batch.iter().map(|pc| (pc.num_points(), pc.feature_dim())).collect();
        let draws = training_draws(&shapes, self.schedule.num_steps(), step_seed);
        let b = batch.len() as f64;
        let results: Vec<Result<(f64, Gradients)>> = batch
            .par_iter()
            .zip(draws.par_iter())
            .map(|(pc, draw)| {
                let pt = forward_jump(pc.positions(), &self.schedule, draw.t, &draw.eps_positions)?;
                let ft = forward_jump(pc.features(), &self.schedule, draw.t, &draw.eps_features)?;
                let mut tape = Tape::new();
                let (ep, ef) = self.model.forward_on_tape(&mut tape, &self.model.store, &pt, &ft, draw.t)?;
                let lp = tape.mse(ep, &draw.eps_positions)?;
                let lf = tape.mse(ef, &draw.eps_features)?;
                let l = tape.add(lp, lf)?;
                let l = tape.scale(l, 0.5 / b);
                Ok((tape.scalar(l), tape.backward(l)?))
            })
            .collect();
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            g.accumulate_into(&mut self.model.store);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite { term: "diffusion loss".into(), step: self.step as usize });
        }
        adam_step(&mut self.model.store, &AdamConfig::with_lr(self.config.lr))?;
        if !self.model.store.all_finite() {
            return Err(Error::NonFinite { term: "denoiser parameters".into(), step: self.step as usize });
        }
        let decay = self.effective_ema_decay();
        ema_update(&mut self.ema, &self.model.store, decay)?;
        let rec = DiffusionLossRecord { step: self.step, loss };
        self.step += 1;
        self.history.push(rec);
        Ok(rec)
    }

    /// Steps until `config.steps` have been taken in total.
    pub fn train(&mut self, data: &[NeuralPointCloud]) -> Result<()> {
        while self.step < self.config.steps {
            self.train_step(data)?;
        }
        Ok(())
    }

    /// Denoiser carrying the EMA weights, used for sampling.
    pub fn ema_denoiser(&self) -> Denoiser {
        Denoiser { config: self.model.config.clone(), store: self.ema.clone() }
    }

    /// Writes `denoiser.params` (with Adam moments), `ema.params` and `state.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_params(&dir.join("denoiser.params"), &self.model.store, true)?;
        save_params(&dir.join("ema.params"), &self.ema, false)?;
        let state = TrainerState { config: self.config.clone(), step: self.step, history: self.history.clone() };
        let path = dir.join("state.json");
        let text = serde_json::to_string_pretty(&state).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("state.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let state: TrainerState = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        state.config.validate()?;
        let schedule = state.config.schedule()?;
        let mut store = load_params(&dir.join("denoiser.params"))?;
        store.step = state.step;
        let model = Denoiser::from_store(state.config.denoiser.clone(), store)?;
        let ema = load_params(&dir.join("ema.params"))?;
        Denoiser::from_store(state.config.denoiser.clone(), ema.clone())?;
        Ok(Self { config: state.config, schedule, model, ema, step: state.step, history: state.history })
    }
}

/// Loads only the EMA denoiser from a training directory.
pub fn load_ema_denoiser(dir: &Path) -> Result<(DiffusionConfig, Denoiser)> {
    let t = DiffusionTrainer::load(dir)?;
    let d = t.ema_denoiser();
    Ok((t.config, d))
}

pub fn write_loss_csv<W: Write>(w: &mut W, history: &[DiffusionLossRecord]) -> std::io::Result<()> {
    writeln!(w, "step,loss")?;
    for r in history {
        writeln!(w, "{},{}", r.step, r.loss)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{linear_schedule, DenoiserConfig};
    use crate::diff::Precision;
    use std::cell::Cell;

    fn clouds(n: usize, m: usize, d: usize, seed: u64) -> Vec<NeuralPointCloud> {
        let mut rng = seeding::rng(seed, 0);
        (0..n)
            .map(|_| NeuralPointCloud::new(standard_normal_mat(m, 3, &mut rng), standard_normal_mat(m, d, &mut rng) * 0.5).unwrap())
            .collect()
    }

    #[test]
    fn oracle_predictor_gives_zero_loss() {
        let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
        let batch = clouds(3, 5, 2, 1);
        let shapes: Vec<_> = batch.iter().map(|pc| (pc.num_points(), pc.feature_dim())).collect();
        let draws = training_draws(&shapes, 1000, 42);
        let calls = Cell::new(0);
        let oracle = |_: &Mat, _: &Mat, t: usize| -> Result<(Mat, Mat)> {
            let d = &draws[calls.get()];
            calls.set(calls.get() + 1);
            assert_eq!(d.t, t);
            Ok((d.eps_positions.clone(), d.eps_features.clone()))
        };
        assert_eq!(training_loss(&oracle, &batch, &s, 42).unwrap(), 0.0);
        assert_eq!(calls.get(), 3);
    }

    #[test]
    fn zero_predictor_has_unit_expected_loss() {
        let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
        let batch = clouds(1, 4, 4, 2);
        let zero = |p: &Mat, f: &Mat, _: usize| -> Result<(Mat, Mat)> { Ok((Mat::zeros(p.dim()), Mat::zeros(f.dim()))) };
        let n = 10_000;
        let losses: Vec<f64> = (0..n).map(|k| training_loss(&zero, &batch, &s, k).unwrap()).collect();
        let mean = losses.iter().sum::<f64>() / n as f64;
        let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!((mean - 1.0).abs() < 5.0 * (var / n as f64).sqrt(), "mean {mean}");
        assert_eq!(training_loss(&zero, &batch, &s, 7).unwrap(), training_loss(&zero, &batch, &s, 7).unwrap());
    }

    #[test]
    fn ema_examples() {
        let mut a = ParamStore::new(Precision::F64);
        a.insert("w", Mat::from_elem((2, 2), 1.0));
        let mut p = ParamStore::new(Precision::F64);
        p.insert("w", Mat::from_elem((2, 2), 3.0));
        let mut e = a.clone();
        ema_update(&mut e, &p, 0.0).unwrap();
        assert_eq!(e.value("w"), p.value("w"));
        let mut e = a.clone();
        ema_update(&mut e, &p, 1.0).unwrap();
        assert_eq!(e.value("w"), a.value("w"));
        let mut e = a.clone();
        let decay: f64 = 0.9;
        for _ in 0..25 {
            ema_update(&mut e, &p, decay).unwrap();
        }
        let closed = 3.0 + (1.0 - 3.0) * decay.powi(25);
        assert!(e.value("w").unwrap().iter().all(|v| (v - closed).abs() < 1e-12));
        let mut other = ParamStore::new(Precision::F64);
        other.insert("v", Mat::zeros((2, 2)));
        assert!(ema_update(&mut e, &other, 0.5).is_err());
    }

    fn tiny_config() -> DiffusionConfig {
        DiffusionConfig {
            timesteps: 50,
            denoiser: DenoiserConfig { layers: 1, model_dim: 16, heads: 2, num_points: 6, feature_dim: 2, time_embedding_dim: 8, mlp_ratio: 2 },
            batch_size: 4,
            steps: 6,
            lr: 1e-3,
            ..Default::default()
        }
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let data = clouds(1, 6, 2, 3);
        let mut cfg = tiny_config();
        cfg.steps = 150;
        let mut a = DiffusionTrainer::new(cfg.clone()).unwrap();
        a.train(&data).unwrap();
        let mut b = DiffusionTrainer::new(cfg).unwrap();
        b.train(&data).unwrap();
        assert_eq!(a.model.store, b.model.store);
        assert_eq!(a.ema, b.ema);
        let first: f64 = a.history[..20].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        let last: f64 = a.history[130..].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        assert!(last < 0.8 * first, "{first} -> {last}");
    }

    #[test]
    fn save_load_resume_is_exact() {
        let data = clouds(2, 6, 2, 4);
        let cfg = DiffusionConfig { precision: Precision::F32, ..tiny_config() };
        let mut full = DiffusionTrainer::new(cfg.clone()).unwrap();
        full.train(&data).unwrap();
        let mut half = DiffusionTrainer::new(cfg).unwrap();
        while half.step < 3 {
            half.train_step(&data).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        half.save(dir.path()).unwrap();
        let mut resumed = DiffusionTrainer::load(dir.path()).unwrap();
        resumed.train(&data).unwrap();
        assert_eq!(resumed.model.store, full.model.store);
        assert_eq!(resumed.ema, full.ema);
        assert_eq!(resumed.history, full.history);
    }

    #[test]
    fn rejects_mismatched_clouds() {
        let mut t = DiffusionTrainer::new(tiny_config()).unwrap();
        assert!(matches!(t.train_step(&clouds(1, 5, 2, 0)), Err(Error::Dimension { .. })));
        assert!(t.train_step(&[]).is_err());
    }

    #[test]
    fn loss_csv() {
        let mut buf = Vec::new();
        write_loss_csv(&mut buf, &[DiffusionLossRecord { step: 0, loss: 0.5 }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,loss\n0,0.5\n");
    }
}
