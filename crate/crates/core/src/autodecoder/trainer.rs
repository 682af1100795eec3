use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::losses::{kl_loss_on_tape, reparameterize_on_tape, tv_loss_on_tape, TvGraph};
use super::{AutodecoderConfig, InitMode, ObjectRecord, LOG_VARIANCE_MAX, LOG_VARIANCE_MIN};
use crate::diff::{adam_step, load_params, save_params, AdamConfig, Gradients, Mat, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::point_cloud::{NeuralPointCloud, VarianceMode, VariationalNeuralPointCloud};
use crate::render::{median_nn_spacing, render_batch, render_image_with_index, Camera, DecoderParams, Image, NeighborIndex, RayBatch, RenderConfig};
use crate::seeding::{self, standard_normal_mat};

const DECODER_TAG: u64 = 0x4445;
const FEATURE_TAG: u64 = 0x4645;
const STEP_TAG: u64 = 0x5354;
const OBJECT_TAG: u64 = 0x4f42;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub recon: f64,
    pub tv: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Clone)]
struct Scene {
    index: NeighborIndex,
    tv: Option<TvGraph>,
}

struct ObjectStep {
    grads: Gradients,
    recon: f64,
    tv: f64,
    kl: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainerState {
    config: AutodecoderConfig,
    render: RenderConfig,
    step: u64,
    freeze_decoder: bool,
    ids: Vec<String>,
    history: Vec<LossRecord>,
}

/// Shared decoder plus per-object latents, trained with Adam.
///
/// Every step draws its randomness from `(seed, step, object)`, so training
/// resumed from a checkpoint continues exactly as an uninterrupted run.
#[derive(Clone)]
pub struct Autodecoder {
    pub config: AutodecoderConfig,
    pub decoder: DecoderParams,
    /// `obj{j}.features`, or `obj{j}.mean` and `obj{j}.logvar` in variational mode.
    pub latents: ParamStore,
    /// Render settings with the resolved neighbor radius.
    pub render: RenderConfig,
    pub step: u64,
    pub history: Vec<LossRecord>,
    pub freeze_decoder: bool,
    pub ids: Vec<String>,
    scenes: Vec<Scene>,
}

pub fn feature_name(j: usize) -> String {
    format!("obj{j}.features")
}

pub fn mean_name(j: usize) -> String {
    format!("obj{j}.mean")
}

pub fn logvar_name(j: usize) -> String {
    format!("obj{j}.logvar")
}

fn resolve_render(records: &[ObjectRecord], cfg: &AutodecoderConfig) -> Result<RenderConfig> {
    let mut render = cfg.render.clone();
    if let Some(mult) = cfg.radius_multiplier {
        let pos: Vec<&Mat> = records.iter().map(|r| &r.positions).collect();
        render.neighbor_radius = mult * median_nn_spacing(&pos)?;
    }
    render.validate()?;
    Ok(render)
}

fn build_scenes(records: &[ObjectRecord], cfg: &AutodecoderConfig, render: &RenderConfig) -> Result<Vec<Scene>> {
    records
        .iter()
        .map(|r| {
            Ok(Scene {
                index: NeighborIndex::build(&r.positions, render.neighbor_radius)?,
                tv: if cfg.lambda_tv > 0.0 { Some(TvGraph::build(&r.positions, cfg.tv_neighborhood_k, render.distance_epsilon)?) } else { None },
            })
        })
        .collect()
}

fn init_latents(records: &[ObjectRecord], cfg: &AutodecoderConfig) -> ParamStore {
    let mut store = ParamStore::new(cfg.precision);
    let d = cfg.feature_dim;
    for (j, r) in records.iter().enumerate() {
        let m = r.positions.nrows();
        let init = match cfg.init_mode {
            InitMode::Zero => Mat::zeros((m, d)),
            InitMode::Random => standard_normal_mat(m, d, &mut seeding::rng_for(cfg.seed, FEATURE_TAG, j as u64)) * cfg.init_std,
        };
        if cfg.variational {
            let lv_cols = match cfg.variance_mode {
                VarianceMode::Diagonal => d,
                VarianceMode::Scalar => 1,
            };
            store.insert(mean_name(j), init);
            store.insert(logvar_name(j), Mat::from_elem((m, lv_cols), cfg.init_log_variance));
        } else {
            store.insert(feature_name(j), init);
        }
    }
    store
}

impl Autodecoder {
    /// Fresh decoder and latents for `records`.
    pub fn new(records: &[ObjectRecord], config: AutodecoderConfig) -> Result<Self> {
        config.validate()?;
        let decoder = DecoderParams::init(config.decoder.clone(), config.precision, &mut seeding::rng_for(config.seed, DECODER_TAG, 0))?;
        let render = resolve_render(records, &config)?;
        Self::assemble(records, config, decoder, render, false)
    }

    /// Fresh latents fit against a fixed decoder and render setup.
    pub fn with_frozen_decoder(records: &[ObjectRecord], config: AutodecoderConfig, decoder: DecoderParams, render: RenderConfig) -> Result<Self> {
        config.validate()?;
        if decoder.config != config.decoder {
            return Err(Error::Config("frozen decoder does not match the configured decoder widths".into()));
        }
        render.validate()?;
        Self::assemble(records, config, decoder, render, true)
    }

    fn assemble(records: &[ObjectRecord], config: AutodecoderConfig, decoder: DecoderParams, render: RenderConfig, freeze_decoder: bool) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Argument("autodecoder needs at least one object".into()));
        }
        let scenes = build_scenes(records, &config, &render)?;
        let latents = init_latents(records, &config);
        Ok(Self {
            decoder,
            latents,
            render,
            step: 0,
            history: Vec::new(),
            freeze_decoder,
            ids: records.iter().map(|r| r.id.clone()).collect(),
            scenes,
            config,
        })
    }

    fn check_records(&self, records: &[ObjectRecord]) -> Result<()> {
        if records.len() != self.ids.len() || records.iter().zip(&self.ids).any(|(r, id)| &r.id != id) {
            return Err(Error::Argument("records do not match the objects this autodecoder was built for".into()));
        }
        Ok(())
    }

    fn object_step(&self, records: &[ObjectRecord], j: usize, step_seed: u64, batch: f64) -> Result<ObjectStep> {
        let cfg = &self.config;
        let rec = &records[j];
        let scene = &self.scenes[j];
        let mut rng = seeding::rng_for(step_seed, OBJECT_TAG, j as u64);
        let mut tape = Tape::new();
        let (features, mean, logvar) = if cfg.variational {
            let mu = tape.param(&self.latents, &mean_name(j))?;
            let lv = tape.param(&self.latents, &logvar_name(j))?;
            let (m, d) = tape.value(mu).dim();
            let eps = standard_normal_mat(m, d, &mut rng);
            (reparameterize_on_tape(&mut tape, mu, lv, eps)?, mu, Some(lv))
        } else {
            let f = tape.param(&self.latents, &feature_name(j))?;
            (f, f, None)
        };

        let n_views = cfg.views_per_object_per_step.min(rec.views.len());
        let mut outputs = Vec::with_capacity(n_views);
        let mut targets = Vec::with_capacity(n_views);
        for v in sample(&mut rng, rec.views.len(), n_views).into_vec() {
            let view = &rec.views[v];
            let cam = &view.camera;
            let n_px = cam.num_pixels();
            let pixels = sample(&mut rng, n_px, cfg.rays_per_view_per_step.min(n_px)).into_vec();
            let rays: Vec<_> = pixels.iter().map(|&p| cam.ray(p % cam.width, p / cam.width)).collect();
            let batch = RayBatch::build(&rec.positions, &scene.index, &rays, cam.near, cam.far, &self.render, Some(&mut rng))?;
            outputs.push(render_batch(&mut tape, &self.decoder, features, &batch)?);
            targets.push(view.image.gather(&pixels));
        }
        let px = tape.concat_rows(&outputs)?;
        let target = ndarray::concatenate(ndarray::Axis(0), &targets.iter().map(|t| t.view()).collect::<Vec<_>>()).expect("3 columns");
        let recon = tape.mse(px, &target)?;
        let mut total = recon;
        let mut tv = 0.0;
        if let Some(graph) = &scene.tv {
            let t = tv_loss_on_tape(&mut tape, mean, graph, cfg.lambda_tv)?;
            tv = tape.scalar(t);
            total = tape.add(total, t)?;
        }
        let mut kl = 0.0;
        if let (Some(lv), true) = (logvar, cfg.lambda_kl > 0.0) {
            let k = kl_loss_on_tape(&mut tape, mean, lv, cfg.lambda_kl)?;
            kl = tape.scalar(k);
            total = tape.add(total, k)?;
        }
        let recon_v = tape.scalar(recon);
        for (term, v) in [("reconstruction", recon_v), ("tv", tv), ("kl", kl)] {
            if !v.is_finite() {
                return Err(Error::NonFinite { term: format!("{term} loss of object {}", rec.id), step: self.step as usize });
            }
        }
        let scaled = tape.scale(total, 1.0 / batch);
        Ok(ObjectStep { grads: tape.backward(scaled)?, recon: recon_v, tv, kl })
    }

    /// One optimization step; returns the batch-averaged loss terms.
    pub fn step(&mut self, records: &[ObjectRecord]) -> Result<LossRecord> {
        self.check_records(records)?;
        let n = records.len();
        let step_seed = seeding::mix(self.config.seed, STEP_TAG, self.step);
        let per_step = self.config.objects_per_step;
        let chosen: Vec<usize> = if per_step == 0 || per_step >= n {
            (0..n).collect()
        } else {
            let mut v = sample(&mut seeding::rng(step_seed, 0), n, per_step).into_vec();
            v.sort_unstable();
            v
        };
        let b = chosen.len() as f64;
        let results: Vec<Result<ObjectStep>> = chosen.par_iter().map(|&j| self.object_step(records, j, step_seed, b)).collect();

        let mut rec = LossRecord { step: self.step, ..Default::default() };
        for r in results {
            let r = r?;
            r.grads.accumulate_into(&mut self.latents);
            if !self.freeze_decoder {
                r.grads.accumulate_into(&mut self.decoder.store);
            }
            rec.recon += r.recon / b;
            rec.tv += r.tv / b;
            rec.kl += r.kl / b;
        }
        rec.total = rec.recon + rec.tv + rec.kl;

        let adam = AdamConfig::with_lr(self.config.lr);
        adam_step(&mut self.latents, &adam)?;
        if !self.freeze_decoder {
            adam_step(&mut self.decoder.store, &adam)?;
        }
        if self.config.variational {
            for j in 0..n {
                if let Some(lv) = self.latents.value_mut(&logvar_name(j)) {
                    lv.mapv_inplace(|v| v.clamp(LOG_VARIANCE_MIN, LOG_VARIANCE_MAX));
                }
            }
        }
        if !self.latents.all_finite() || !self.decoder.store.all_finite() {
            return Err(Error::NonFinite { term: "parameters after update".into(), step: self.step as usize });
        }
        self.step += 1;
        self.history.push(rec);
        Ok(rec)
    }

    /// Steps until `config.steps` have been taken in total.
    pub fn train(&mut self, records: &[ObjectRecord]) -> Result<()> {
        self.train_until(records, self.config.steps)
    }

    pub fn train_until(&mut self, records: &[ObjectRecord], until: u64) -> Result<()> {
        while self.step < until {
            self.step(records)?;
        }
        Ok(())
    }

    /// Point features of object `j` (the means in variational mode).
    pub fn features(&self, j: usize) -> Result<&Mat> {
        let name = if self.config.variational { mean_name(j) } else { feature_name(j) };
        self.latents.value(&name).ok_or_else(|| Error::Argument(format!("no object {j}")))
    }

    pub fn fitted_clouds(&self, records: &[ObjectRecord]) -> Result<Vec<NeuralPointCloud>> {
        self.check_records(records)?;
        records.iter().enumerate().map(|(j, r)| NeuralPointCloud::new(r.positions.clone(), self.features(j)?.clone())).collect()
    }

    pub fn variational_clouds(&self, records: &[ObjectRecord]) -> Result<Vec<VariationalNeuralPointCloud>> {
        self.check_records(records)?;
        if !self.config.variational {
            return Err(Error::State("autodecoder is not variational".into()));
        }
        records
            .iter()
            .enumerate()
            .map(|(j, r)| {
                let lv = self.latents.value(&logvar_name(j)).expect("variational latents").clone();
                VariationalNeuralPointCloud::new(r.positions.clone(), self.features(j)?.clone(), lv)
            })
            .collect()
    }

    /// Renders object `j` from `camera` with midpoint depths.
    pub fn render_view(&self, records: &[ObjectRecord], j: usize, camera: &Camera) -> Result<Image> {
        self.check_records(records)?;
        let pc = NeuralPointCloud::new(records[j].positions.clone(), self.features(j)?.clone())?;
        render_image_with_index(&pc, &self.scenes[j].index, &self.decoder, camera, &self.render)
    }

    /// Mean PSNR over every training view of every object.
    pub fn training_view_psnr(&self, records: &[ObjectRecord]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0;
        for (j, r) in records.iter().enumerate() {
            for v in &r.views {
                total += psnr(&self.render_view(records, j, &v.camera)?, &v.image)?;
                count += 1;
            }
        }
        Ok(total / count as f64)
    }

    /// Writes decoder and latents (with optimizer moments) plus `state.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_params(&dir.join("decoder.params"), &self.decoder.store, true)?;
        save_params(&dir.join("latents.params"), &self.latents, true)?;
        let state = TrainerState {
            config: self.config.clone(),
            render: self.render.clone(),
            step: self.step,
            freeze_decoder: self.freeze_decoder,
            ids: self.ids.clone(),
            history: self.history.clone(),
        };
        let path = dir.join("state.json");
        let text = serde_json::to_string_pretty(&state).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, records: &[ObjectRecord]) -> Result<Self> {
        let path = dir.join("state.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let state: TrainerState = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let mut store = load_params(&dir.join("decoder.params"))?;
        store.precision = state.config.precision;
        let decoder = DecoderParams::from_store(state.config.decoder.clone(), store)?;
        let mut latents = load_params(&dir.join("latents.params"))?;
        latents.precision = state.config.precision;
        let scenes = build_scenes(records, &state.config, &state.render)?;
        let ad = Self {
            config: state.config,
            decoder,
            latents,
            render: state.render,
            step: state.step,
            history: state.history,
            freeze_decoder: state.freeze_decoder,
            ids: state.ids,
            scenes,
        };
        ad.check_records(records)?;
        Ok(ad)
    }
}

/// CSV with columns `step,recon,tv,kl,total`.
pub fn write_history_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "step,recon,tv,kl,total").expect("in-memory write");
    for r in history {
        writeln!(out, "{},{},{},{},{}", r.step, r.recon, r.tv, r.kl, r.total).expect("in-memory write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Precision;
    use crate::render::{DecoderConfig, Image, View};
    use crate::toy::{build_dataset, CameraRig, DatasetConfig};

    fn records(n: usize, views: usize) -> Vec<ObjectRecord> {
        let cfg = DatasetConfig {
            n_objects: n,
            views_per_object: views,
            m_points: 48,
            n_dense: 1024,
            rig: CameraRig { image_size: 12, ..Default::default() },
            seed: 3,
            ..Default::default()
        };
        build_dataset(&cfg, None).unwrap().records
    }

    fn tiny(d: usize) -> AutodecoderConfig {
        AutodecoderConfig {
            feature_dim: d,
            decoder: DecoderConfig {
                feature_dim: d,
                hidden_width: 12,
                shading_dim: 12,
                aggregation_hidden_layers: 1,
                color_hidden_layers: 1,
                density_hidden_layers: 1,
                ..Default::default()
            },
            render: RenderConfig { shading_points_per_ray: 24, ..Default::default() },
            rays_per_view_per_step: 32,
            lr: 5e-3,
            ..Default::default()
        }
    }

    #[test]
    fn positions_never_change_and_pure_recon() {
        let recs = records(2, 2);
        let before: Vec<Mat> = recs.iter().map(|r| r.positions.clone()).collect();
        let mut ad = Autodecoder::new(&recs, tiny(4)).unwrap();
        let l = ad.step(&recs).unwrap();
        assert_eq!(l.tv, 0.0);
        assert_eq!(l.kl, 0.0);
        assert_eq!(l.total, l.recon);
        let after = ad.fitted_clouds(&recs).unwrap();
        for (b, a) in before.iter().zip(&after) {
            assert_eq!(b, a.positions());
        }
    }

    #[test]
    fn bit_reproducible_and_resumable() {
        let recs = records(2, 2);
        let cfg = AutodecoderConfig { precision: Precision::F32, lambda_tv: 0.01, ..tiny(4) };
        let mut a = Autodecoder::new(&recs, cfg.clone()).unwrap();
        a.train_until(&recs, 6).unwrap();
        let mut b = Autodecoder::new(&recs, cfg.clone()).unwrap();
        b.train_until(&recs, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        let mut c = Autodecoder::load(dir.path(), &recs).unwrap();
        c.train_until(&recs, 6).unwrap();
        assert_eq!(a.history, c.history);
        assert_eq!(a.latents, c.latents);
        assert_eq!(a.decoder.store, c.decoder.store);
    }

    #[test]
    fn variational_terms_and_clamp() {
        let recs = records(1, 2);
        let cfg = AutodecoderConfig { variational: true, lambda_kl: 1e-3, init_log_variance: LOG_VARIANCE_MIN, lr: 0.5, ..tiny(3) };
        let mut ad = Autodecoder::new(&recs, cfg).unwrap();
        let l = ad.step(&recs).unwrap();
        assert!(l.kl > 0.0);
        let lv = ad.latents.value(&logvar_name(0)).unwrap();
        assert!(lv.iter().all(|&v| (LOG_VARIANCE_MIN..=LOG_VARIANCE_MAX).contains(&v)));
    }

    #[test]
    fn single_view_fit_improves() {
        let recs = records(1, 1);
        let mut ad = Autodecoder::new(&recs, AutodecoderConfig { rays_per_view_per_step: 144, lr: 1e-2, ..tiny(4) }).unwrap();
        let view = &recs[0].views[0];
        let mse = |ad: &Autodecoder| crate::autodecoder::pixel_mse(&ad.render_view(&recs, 0, &view.camera).unwrap().to_mat(), &view.image.to_mat()).unwrap();
        let initial = mse(&ad);
        ad.train_until(&recs, 150).unwrap();
        assert!(mse(&ad) < initial / 4.0, "{} -> {}", initial, mse(&ad));
    }

    #[test]
    fn frozen_decoder_is_untouched() {
        let recs = records(1, 2);
        let ad = Autodecoder::new(&recs, tiny(4)).unwrap();
        let mut frozen = Autodecoder::with_frozen_decoder(&recs, tiny(4), ad.decoder.clone(), ad.render.clone()).unwrap();
        frozen.train_until(&recs, 3).unwrap();
        assert_eq!(frozen.decoder.store.values_only(), ad.decoder.store.values_only());
        assert_ne!(frozen.features(0).unwrap(), ad.features(0).unwrap());
    }

    #[test]
    fn mismatched_records_rejected() {
        let recs = records(2, 1);
        let mut ad = Autodecoder::new(&recs, tiny(4)).unwrap();
        assert!(matches!(ad.step(&recs[..1]), Err(Error::Argument(_))));
        let img = Image::filled(12, 12, [1.0; 3]);
        let bad = vec![ObjectRecord::new("x".into(), recs[0].positions.clone(), vec![View::new(img, recs[0].views[0].camera.clone()).unwrap()]).unwrap(), recs[1].clone()];
        assert!(ad.step(&bad).is_err());
    }

    #[test]
    fn history_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        write_history_csv(&p, &[LossRecord { step: 0, recon: 0.5, tv: 0.25, kl: 0.0, total: 0.75 }]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "step,recon,tv,kl,total\n0,0.5,0.25,0,0.75\n");
    }
}
