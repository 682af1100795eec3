use std::path::{Path, PathBuf};

use log::info;
use npcd::autodecoder::{write_history_csv, Autodecoder, ObjectRecord};
use npcd::diff::Mat;
use npcd::diffusion::{sample_unconditional_traced, write_loss_csv, DiffusionTrainer, Trace};
use npcd::metrics::{self, MetricReport, SetDistance};
use npcd::point_cloud::{self, compute_normalization, normalize, ClipBounds, NeuralPointCloud, NormalizationStats};
use npcd::render::{load_cameras, render_image, Camera, Image};
use npcd::sampler::{self, disentangled_sample, Pinned, PinnedModality, SamplerConfig};
use npcd::seeding;
use npcd::toy::{build_dataset, load_dataset, sample_camera_poses, PoseMode, Split};
use serde::Serialize;

use crate::artifacts::*;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::{Command, SampleMode};

/// Trajectory dump cadence in timesteps.
pub const TRAJECTORY_EVERY: usize = 100;
const SAMPLE_TAG: u64 = 0x534d;
const CHECKPOINT_DIR: &str = "checkpoint";

pub fn dispatch(command: Command, cfg: RunConfig) -> CliResult<()> {
    match command {
        Command::GenData { out } => gen_data(cfg, &out),
        Command::TrainAutodecoder { data, out, resume, steps, lambda_tv, lambda_kl, checkpoint_every } => {
            let mut cfg = cfg;
            if let Some(s) = steps {
                cfg.autodecoder.steps = s;
            }
            if let Some(l) = lambda_tv {
                cfg.autodecoder.lambda_tv = l;
            }
            if let Some(l) = lambda_kl {
                cfg.autodecoder.lambda_kl = l;
            }
            train_autodecoder(cfg, &data, &out, resume, checkpoint_every)
        }
        Command::TrainDiffusion { clouds, out, resume, steps, checkpoint_every } => {
            let mut cfg = cfg;
            if let Some(s) = steps {
                cfg.diffusion.steps = s;
            }
            train_diffusion(cfg, &clouds, &out, resume, checkpoint_every)
        }
        Command::Sample { checkpoint, mode, input, preset, n_rev, n_repaint, n_resample, num_samples, trajectory, decoder, cameras, out } => {
            let req = SampleRequest { mode, input, preset, n_rev, n_repaint, n_resample, num_samples, trajectory, decoder, cameras };
            sample(cfg, &checkpoint, req, &out)
        }
        Command::Eval { generated, reference, metrics, generated_renders, reference_renders, out } => {
            let renders = generated_renders.zip(reference_renders);
            eval(cfg, &generated, &reference, metrics, renders, &out)
        }
        Command::Render { decoder, cloud, cameras, views, out } => render(cfg, &decoder, &cloud, cameras.as_deref(), views, &out),
    }
}

pub fn gen_data(cfg: RunConfig, out: &Path) -> CliResult<()> {
    let _lock = OutputLock::acquire(out)?;
    let ds = build_dataset(&cfg.dataset, Some(out))?;
    stamp(out, "gen-data", &cfg)?;
    let n_test = ds.manifest.objects.iter().filter(|e| e.split == Split::Test).count();
    let d = &cfg.dataset;
    println!(
        "dataset: {} objects ({} train, {} test), {} views of {}px, {} points each, config {}",
        d.n_objects,
        d.n_objects - n_test,
        n_test,
        d.views_per_object,
        d.rig.image_size,
        d.m_points,
        cfg.hash()
    );
    Ok(())
}

fn resume_mismatch(what: &str) -> CliError {
    CliError::Config(format!("checkpoint was trained with a different {what} configuration; only the step count may change on resume"))
}

pub fn train_autodecoder(cfg: RunConfig, data: &Path, out: &Path, resume: bool, checkpoint_every: u64) -> CliResult<()> {
    let _lock = OutputLock::acquire(out)?;
    let ds = load_dataset(data)?;
    let records: Vec<ObjectRecord> = ds.train_records().into_iter().cloned().collect();
    let ckpt = out.join(CHECKPOINT_DIR);
    let until = cfg.autodecoder.steps;
    let mut ad = if resume && ckpt.join("state.json").exists() {
        let mut ad = Autodecoder::load(&ckpt, &records)?;
        ad.config.steps = until;
        if ad.config != cfg.autodecoder {
            return Err(resume_mismatch("autodecoder"));
        }
        info!("resuming autodecoder at step {}", ad.step);
        ad
    } else {
        Autodecoder::new(&records, cfg.autodecoder.clone())?
    };
    let every = checkpoint_every.max(1);
    while ad.step < until {
        let rec = ad.step(&records)?;
        if ad.step % every == 0 || ad.step == until {
            ad.save(&ckpt)?;
            info!("step {} recon {:.6} tv {:.6} kl {:.6}", rec.step + 1, rec.recon, rec.tv, rec.kl);
        }
    }
    ad.save(&ckpt)?;
    write_history_csv(&out.join("loss.csv"), &ad.history)?;
    let hash = cfg.hash();
    save_decoder(out, &ad.decoder, &ad.render, &hash)?;

    let clouds_dir = out.join("clouds");
    create_dir(&clouds_dir)?;
    let clouds = ad.fitted_clouds(&records)?;
    for (r, pc) in records.iter().zip(&clouds) {
        point_cloud::save(pc, &clouds_dir.join(format!("{}.npcd", r.id)))?;
    }
    compute_normalization(&clouds)?.save_json(&clouds_dir.join(NORMALIZATION_FILE))?;
    stamp(&clouds_dir, "train-autodecoder", &cfg)?;
    stamp(out, "train-autodecoder", &cfg)?;
    if let Some(last) = ad.history.last() {
        println!("autodecoder: {} steps, final reconstruction loss {:.6}, config {hash}", ad.step, last.recon);
    }
    Ok(())
}

pub fn train_diffusion(cfg: RunConfig, clouds_dir: &Path, out: &Path, resume: bool, checkpoint_every: u64) -> CliResult<()> {
    let _lock = OutputLock::acquire(out)?;
    let clouds = load_clouds(clouds_dir)?;
    let stats = load_normalization(clouds_dir)?;
    let data: Vec<NeuralPointCloud> = clouds.iter().map(|(_, pc)| normalize(pc, &stats)).collect::<npcd::Result<_>>()?;
    let den = &cfg.diffusion.denoiser;
    let (m, d) = (data[0].num_points(), data[0].feature_dim());
    if den.num_points != m || den.feature_dim != d {
        return Err(CliError::Config(format!(
            "diffusion.denoiser expects {}x{} clouds but {} holds {m}x{d}",
            den.num_points,
            den.feature_dim,
            clouds_dir.display()
        )));
    }
    let clip = ClipBounds::from_normalized(&data)?;
    let ckpt = out.join(CHECKPOINT_DIR);
    let until = cfg.diffusion.steps;
    let mut tr = if resume && ckpt.join("state.json").exists() {
        let mut tr = DiffusionTrainer::load(&ckpt)?;
        tr.config.steps = until;
        if tr.config != cfg.diffusion {
            return Err(resume_mismatch("diffusion"));
        }
        info!("resuming diffusion at step {}", tr.step);
        tr
    } else {
        DiffusionTrainer::new(cfg.diffusion.clone())?
    };
    let every = checkpoint_every.max(1);
    while tr.step < until {
        let rec = tr.train_step(&data)?;
        if tr.step % every == 0 || tr.step == until {
            tr.save(&ckpt)?;
            info!("step {} loss {:.6}", rec.step + 1, rec.loss);
        }
    }
    tr.save(&ckpt)?;
    let mut csv = Vec::new();
    write_loss_csv(&mut csv, &tr.history).map_err(|e| CliError::Io(e.to_string()))?;
    let csv_path = out.join("loss.csv");
    std::fs::write(&csv_path, csv).map_err(|e| CliError::io(&csv_path, e))?;
    stats.save_json(&out.join(NORMALIZATION_FILE))?;
    write_json(&out.join(CLIP_FILE), &clip)?;
    stamp(out, "train-diffusion", &cfg)?;
    let tail = &tr.history[tr.history.len().saturating_sub(100)..];
    if !tail.is_empty() {
        let mean = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64;
        println!("diffusion: {} steps on {} clouds, mean loss of last {} steps {mean:.6}, config {}", tr.step, data.len(), tail.len(), cfg.hash());
    }
    Ok(())
}

#[derive(Debug, Default)]
pub struct SampleRequest {
    pub mode: Option<SampleMode>,
    pub input: Option<PathBuf>,
    pub preset: Option<String>,
    pub n_rev: Option<usize>,
    pub n_repaint: Option<usize>,
    pub n_resample: Option<usize>,
    pub num_samples: Option<usize>,
    pub trajectory: bool,
    pub decoder: Option<PathBuf>,
    pub cameras: Option<PathBuf>,
}

#[derive(Serialize)]
struct SampleSummary {
    config_hash: String,
    mode: &'static str,
    sampler: SamplerConfig,
    samples: Vec<SampleEntry>,
}

#[derive(Serialize)]
struct SampleEntry {
    file: String,
    seed: u64,
    denoiser_calls: usize,
    trajectory_states: usize,
}

fn mode_name(mode: SampleMode) -> &'static str {
    match mode {
        SampleMode::Unconditional => "unconditional",
        SampleMode::AppearanceOnly => "appearance-only",
        SampleMode::ShapeOnly => "shape-only",
    }
}

/// Applies preset and flag overrides to the sampler section and returns the
/// effective mode and knobs.
fn resolve_sampling(cfg: &mut RunConfig, req: &SampleRequest) -> CliResult<(SampleMode, SamplerConfig)> {
    let s = &mut cfg.sampler;
    if req.preset.is_some() {
        s.preset = req.preset.clone();
    }
    let mut mode = req.mode;
    if let Some(name) = &s.preset {
        let p = sampler::preset(name)?;
        s.n_rev = p.config.n_rev;
        s.n_repaint = p.config.n_repaint;
        s.n_resample = p.config.n_resample;
        let implied = match p.pinned {
            PinnedModality::Positions => SampleMode::AppearanceOnly,
            PinnedModality::Features => SampleMode::ShapeOnly,
        };
        match mode {
            None => mode = Some(implied),
            Some(m) if m != implied => {
                return Err(CliError::Config(format!("preset {name} is {} but --mode {} was given", mode_name(implied), mode_name(m))));
            }
            Some(_) => {}
        }
    }
    s.n_rev = req.n_rev.unwrap_or(s.n_rev);
    s.n_repaint = req.n_repaint.unwrap_or(s.n_repaint);
    s.n_resample = req.n_resample.unwrap_or(s.n_resample);
    s.num_samples = req.num_samples.unwrap_or(s.num_samples);
    if s.num_samples == 0 {
        return Err(CliError::Config("num_samples must be at least 1".into()));
    }
    Ok((mode.unwrap_or(SampleMode::Unconditional), SamplerConfig::new(s.n_rev, s.n_repaint, s.n_resample)))
}

fn denormalized_state(stats: &NormalizationStats, p: &Mat, f: &Mat) -> CliResult<NeuralPointCloud> {
    Ok(NeuralPointCloud::new(stats.denormalize_positions(p), stats.denormalize_features(f))?)
}

fn render_cameras(cfg: &RunConfig, file: Option<&Path>, count: usize) -> CliResult<Vec<Camera>> {
    match file {
        Some(p) => Ok(load_cameras(p)?),
        None => Ok(sample_camera_poses(count, &cfg.dataset.rig, PoseMode::Spiral, 0)?),
    }
}

pub fn sample(mut cfg: RunConfig, checkpoint: &Path, req: SampleRequest, out: &Path) -> CliResult<()> {
    let (mode, knobs) = resolve_sampling(&mut cfg, &req)?;
    let input = match (mode, &req.input) {
        (SampleMode::Unconditional, _) => None,
        (_, Some(p)) => Some(point_cloud::load(p)?),
        (m, None) => return Err(CliError::Config(format!("--mode {} needs an --input cloud", mode_name(m)))),
    };
    let _lock = OutputLock::acquire(out)?;
    let trainer = DiffusionTrainer::load(&checkpoint.join(CHECKPOINT_DIR))?;
    let schedule = trainer.config.schedule()?;
    let denoiser = trainer.ema_denoiser();
    let stats = load_normalization(checkpoint)?;
    let clip: ClipBounds = read_json(&checkpoint.join(CLIP_FILE))?;
    let decoder = req.decoder.as_deref().map(load_decoder).transpose()?;
    let cameras = match decoder {
        Some(_) => render_cameras(&cfg, req.cameras.as_deref(), cfg.sampler.render_views)?,
        None => Vec::new(),
    };

    let pinned_input = match (&input, mode) {
        (Some(pc), SampleMode::AppearanceOnly) => Some(stats.normalize_positions(pc.positions())),
        (Some(pc), SampleMode::ShapeOnly) => {
            if pc.feature_dim() != stats.feature_dim() {
                return Err(CliError::Config(format!("input has {} feature dims, checkpoint expects {}", pc.feature_dim(), stats.feature_dim())));
            }
            Some(stats.normalize_features(pc.features()))
        }
        _ => None,
    };

    let every = if req.trajectory { TRAJECTORY_EVERY } else { 0 };
    let mut entries = Vec::new();
    for k in 0..cfg.sampler.num_samples {
        let seed = seeding::mix(cfg.sampler.seed, SAMPLE_TAG, k as u64);
        let mut trace = Trace::recording(every);
        let mut pc = match (mode, &pinned_input) {
            (SampleMode::Unconditional, _) => {
                sample_unconditional_traced(&denoiser, &schedule, &stats, &clip, denoiser.config.num_points, seed, &mut trace)?
            }
            (SampleMode::AppearanceOnly, Some(p)) => {
                disentangled_sample(&denoiser, Pinned::Positions(p), &schedule, &knobs, &stats, &clip, seed, &mut trace)?
            }
            (SampleMode::ShapeOnly, Some(f)) => {
                disentangled_sample(&denoiser, Pinned::Features(f), &schedule, &knobs, &stats, &clip, seed, &mut trace)?
            }
            _ => unreachable!("conditional modes always carry an input"),
        };
        // With n_rev = 0 the pinned modality is the input itself; copy it so
        // the normalize/denormalize round trip cannot perturb the last bit.
        if knobs.n_rev == 0 {
            if let Some(given) = &input {
                pc = match mode {
                    SampleMode::AppearanceOnly => NeuralPointCloud::new(given.positions().clone(), pc.features().clone())?,
                    SampleMode::ShapeOnly => pc.with_features(given.features().clone())?,
                    SampleMode::Unconditional => pc,
                };
            }
        }
        let name = format!("sample_{k:03}");
        point_cloud::save(&pc, &out.join(format!("{name}.npcd")))?;
        if req.trajectory {
            let dir = out.join("trajectory").join(&name);
            create_dir(&dir)?;
            for (t, p, f) in &trace.states {
                point_cloud::save(&denormalized_state(&stats, p, f)?, &dir.join(format!("t{t:04}.npcd")))?;
            }
        }
        if let Some((dec, rcfg)) = &decoder {
            let dir = out.join("renders");
            create_dir(&dir)?;
            for (v, cam) in cameras.iter().enumerate() {
                render_image(&pc, dec, cam, rcfg)?.save_ppm(&dir.join(format!("{name}_view{v:02}.ppm")))?;
            }
        }
        info!("{name}: {} denoiser calls", trace.calls);
        entries.push(SampleEntry { file: format!("{name}.npcd"), seed, denoiser_calls: trace.calls, trajectory_states: trace.states.len() });
    }
    let summary = SampleSummary { config_hash: cfg.hash(), mode: mode_name(mode), sampler: knobs, samples: entries };
    write_json(&out.join("samples.json"), &summary)?;
    stamp(out, "sample", &cfg)?;
    println!("sampled {} cloud(s) ({}), config {}", summary.samples.len(), summary.mode, summary.config_hash);
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct RenderScores {
    /// Mean PSNR over generated renders with a same-named reference.
    pub mean_psnr: Option<f64>,
    pub matched: usize,
    pub retrieval: Vec<Retrieval>,
}

#[derive(Debug, Serialize)]
pub struct Retrieval {
    pub query: String,
    pub nearest: String,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub generated: usize,
    pub reference: usize,
    pub metrics: Vec<MetricReport>,
    pub renders: Option<RenderScores>,
}

fn parse_metric(name: &str) -> CliResult<SetDistance> {
    match name.trim() {
        "chamfer" | "cd" => Ok(SetDistance::Chamfer),
        "emd" => Ok(SetDistance::Emd),
        other => Err(CliError::Config(format!("unknown metric '{other}', expected chamfer or emd"))),
    }
}

fn load_images(dir: &Path) -> CliResult<Vec<(String, Image)>> {
    let files = list_files(dir, "ppm")?;
    if files.is_empty() {
        return Err(CliError::Config(format!("{} contains no .ppm files", dir.display())));
    }
    files.iter().map(|f| Ok((file_stem(f), Image::load_ppm(f)?))).collect()
}

fn score_renders(generated: &Path, reference: &Path) -> CliResult<RenderScores> {
    let gen = load_images(generated)?;
    let refs = load_images(reference)?;
    let mut retrieval = Vec::with_capacity(gen.len());
    let (mut total, mut matched) = (0.0, 0);
    for (name, img) in &gen {
        retrieval.push(Retrieval { query: name.clone(), nearest: metrics::pixel_retrieval(img, &refs)?.to_string() });
        if let Some((_, r)) = refs.iter().find(|(n, _)| n == name) {
            total += metrics::psnr(img, r)?;
            matched += 1;
        }
    }
    Ok(RenderScores { mean_psnr: (matched > 0).then(|| total / matched as f64), matched, retrieval })
}

pub fn eval(
    mut cfg: RunConfig,
    generated: &Path,
    reference: &Path,
    metric_names: Option<Vec<String>>,
    renders: Option<(PathBuf, PathBuf)>,
    out: &Path,
) -> CliResult<()> {
    if let Some(names) = metric_names {
        cfg.eval.metrics = names.iter().map(|n| parse_metric(n)).collect::<CliResult<_>>()?;
    }
    let gen = load_clouds(generated)?;
    let refs = load_clouds(reference)?;
    let (gs, rs) = (generated.join(NORMALIZATION_FILE), reference.join(NORMALIZATION_FILE));
    if gs.exists() && rs.exists() && load_normalization(generated)? != load_normalization(reference)? {
        return Err(CliError::Config("generated and reference clouds carry different normalization stats".into()));
    }
    let _lock = OutputLock::acquire(out)?;
    let gp: Vec<Mat> = gen.iter().map(|(_, pc)| pc.positions().clone()).collect();
    let rp: Vec<Mat> = refs.iter().map(|(_, pc)| pc.positions().clone()).collect();
    let mut reports = Vec::new();
    for &which in &cfg.eval.metrics {
        let v = metrics::one_nn_accuracy(&gp, &rp, which)?;
        let (name, convention) = match which {
            SetDistance::Chamfer => ("1-nna-chamfer", metrics::CHAMFER_CONVENTION),
            SetDistance::Emd => ("1-nna-emd", metrics::EMD_CONVENTION),
        };
        reports.push(metrics::report(name, v, vec![gp.len(), rp.len()], convention));
    }
    let renders = renders.map(|(g, r)| score_renders(&g, &r)).transpose()?;
    let report = EvalReport { config_hash: cfg.hash(), generated: gp.len(), reference: rp.len(), metrics: reports, renders };
    write_json(&out.join("report.json"), &report)?;
    stamp(out, "eval", &cfg)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

pub fn render(cfg: RunConfig, decoder: &Path, cloud: &Path, cameras: Option<&Path>, views: usize, out: &Path) -> CliResult<()> {
    let _lock = OutputLock::acquire(out)?;
    let (dec, rcfg) = load_decoder(decoder)?;
    let pc = point_cloud::load(cloud)?;
    let cams = render_cameras(&cfg, cameras, views)?;
    for (v, cam) in cams.iter().enumerate() {
        render_image(&pc, &dec, cam, &rcfg)?.save_ppm(&out.join(format!("view_{v:03}.ppm")))?;
    }
    stamp(out, "render", &cfg)?;
    println!("rendered {} view(s) of {}", cams.len(), cloud.display());
    Ok(())
}
