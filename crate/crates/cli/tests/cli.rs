use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use npcd::point_cloud;
use tempfile::TempDir;

const TINY: &str = r#"{
  "dataset": {"n_objects": 2, "views_per_object": 4, "m_points": 16, "n_dense": 256, "rig": {"image_size": 8}},
  "autodecoder": {"steps": 30, "rays_per_view_per_step": 16, "render": {"shading_points_per_ray": 16}, "precision": "f32"},
  "diffusion": {"timesteps": 200, "steps": 40, "batch_size": 2, "precision": "f32",
    "denoiser": {"layers": 1, "model_dim": 16, "heads": 2, "num_points": 16, "feature_dim": 8, "time_embedding_dim": 8, "mlp_ratio": 2}},
  "sampler": {"num_samples": 2, "render_views": 2}
}"#;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn npcd(dir: &Path, args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_npcd"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("NPCD_THREADS")
        .args(args)
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn ok(dir: &Path, args: &[&str]) -> Run {
    let r = npcd(dir, args);
    assert_eq!(r.code, 0, "npcd {args:?} failed:\n{}", r.stderr);
    r
}

fn workspace(config: &str) -> TempDir {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("config.json"), config).unwrap();
    dir
}

/// Every regular file under `root` with its contents, sorted by relative path.
fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut v = Vec::new();
    walk(root, root, &mut v);
    v.sort();
    v
}

/// Dataset, autodecoder and diffusion outputs shared by the sampling and eval tests.
fn pipeline() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let w = workspace(TINY);
        let d = w.path();
        ok(d, &["--config", "config.json", "gen-data", "--out", "data"]);
        ok(d, &["--config", "config.json", "train-autodecoder", "--data", "data", "--out", "ad"]);
        ok(d, &["--config", "config.json", "train-diffusion", "--clouds", "ad/clouds", "--out", "diff"]);
        w
    })
    .path()
}

fn loss_column(path: &Path, col: usize) -> Vec<f64> {
    std::fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect()
}

fn provenance(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("provenance.json")).unwrap()).unwrap()
}

#[test]
fn gen_data_minimal_and_reproducible() {
    let w = workspace(TINY);
    let d = w.path();
    let r = ok(d, &["--config", "config.json", "gen-data", "--out", "a"]);
    assert!(r.stdout.contains("2 objects"));
    assert!(d.join("a/manifest.json").exists());
    ok(d, &["--config", "config.json", "gen-data", "--out", "b"]);
    assert_eq!(snapshot(&d.join("a")), snapshot(&d.join("b")));
    ok(d, &["--config", "config.json", "--seed", "3", "gen-data", "--out", "c"]);
    assert_ne!(snapshot(&d.join("a")), snapshot(&d.join("c")));
}

#[test]
fn gen_data_with_all_defaults() {
    let w = workspace("{}");
    let r = ok(w.path(), &["gen-data", "--out", "data"]);
    assert!(r.stdout.contains("8 objects"));
    let hash = provenance(&w.path().join("data"))["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash, npcd_cli::RunConfig::default().hash());
}

#[test]
fn unknown_config_key_exits_2() {
    let w = workspace(r#"{"dataset": {"n_objects": 1, "flavour": "spicy"}}"#);
    let r = npcd(w.path(), &["--config", "config.json", "gen-data", "--out", "data"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("flavour"), "{}", r.stderr);
}

#[test]
fn invalid_config_value_exits_2() {
    let w = workspace(r#"{"dataset": {"n_objects": 0}}"#);
    assert_eq!(npcd(w.path(), &["--config", "config.json", "gen-data", "--out", "data"]).code, 2);
}

#[test]
fn missing_config_file_exits_3() {
    let w = workspace("{}");
    assert_eq!(npcd(w.path(), &["--config", "nope.json", "gen-data", "--out", "data"]).code, 3);
}

#[test]
fn missing_dataset_exits_3() {
    let w = workspace(TINY);
    let r = npcd(w.path(), &["--config", "config.json", "train-autodecoder", "--data", "nowhere", "--out", "ad"]);
    assert_eq!(r.code, 3, "{}", r.stderr);
}

#[test]
fn locked_output_exits_3() {
    let w = workspace(TINY);
    std::fs::create_dir_all(w.path().join("data")).unwrap();
    std::fs::write(w.path().join("data/.npcd.lock"), b"").unwrap();
    let r = npcd(w.path(), &["--config", "config.json", "gen-data", "--out", "data"]);
    assert_eq!(r.code, 3);
    assert!(r.stderr.contains("locked"));
}

#[test]
fn autodecoder_loss_decreases() {
    let one = TINY.replace(r#""n_objects": 2"#, r#""n_objects": 1"#);
    let w = workspace(&one);
    let d = w.path();
    ok(d, &["--config", "config.json", "gen-data", "--out", "data"]);
    ok(d, &["--config", "config.json", "train-autodecoder", "--data", "data", "--out", "ad", "--steps", "200"]);
    let recon = loss_column(&d.join("ad/loss.csv"), 1);
    assert_eq!(recon.len(), 200);
    let head = recon[..10].iter().sum::<f64>() / 10.0;
    let tail = recon[190..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "first {head} last {tail}");
}

#[test]
fn autodecoder_resume_matches_uninterrupted() {
    let w = workspace(TINY);
    let d = w.path();
    ok(d, &["--config", "config.json", "gen-data", "--out", "data"]);
    ok(d, &["--config", "config.json", "train-autodecoder", "--data", "data", "--out", "full", "--steps", "24", "--checkpoint-every", "8"]);
    ok(d, &["--config", "config.json", "train-autodecoder", "--data", "data", "--out", "split", "--steps", "10"]);
    ok(d, &["--config", "config.json", "train-autodecoder", "--data", "data", "--out", "split", "--steps", "24", "--resume"]);
    assert_eq!(snapshot(&d.join("full")), snapshot(&d.join("split")));

    let r = npcd(d, &["--config", "config.json", "train-autodecoder", "--data", "data", "--out", "split", "--steps", "30", "--resume", "--lambda-tv", "0.1"]);
    assert_eq!(r.code, 2, "{}", r.stderr);
}

#[test]
fn lambda_flags_override_config() {
    let w = workspace(TINY);
    let d = w.path();
    ok(d, &["--config", "config.json", "gen-data", "--out", "data"]);
    ok(d, &["--config", "config.json", "train-autodecoder", "--data", "data", "--out", "ad", "--steps", "3", "--lambda-tv", "0.25"]);
    assert_eq!(provenance(&d.join("ad"))["config"]["autodecoder"]["lambda_tv"], 0.25);
    // Zero-initialized features are all equal, so TV only appears after the first update.
    let tv = loss_column(&d.join("ad/loss.csv"), 2);
    assert_eq!(tv[0], 0.0);
    assert!(tv[1..].iter().all(|&v| v > 0.0));
}

#[test]
fn diverging_autodecoder_exits_4() {
    let cfg = TINY.replace(r#""steps": 30,"#, r#""steps": 30, "init_mode": "random", "init_std": 1e306,"#);
    let w = workspace(&cfg);
    let d = w.path();
    ok(d, &["--config", "config.json", "gen-data", "--out", "data"]);
    let r = npcd(d, &["--config", "config.json", "train-autodecoder", "--data", "data", "--out", "ad"]);
    assert_eq!(r.code, 4, "{}", r.stderr);
    assert!(r.stderr.contains("non-finite"), "{}", r.stderr);
}

#[test]
fn diffusion_training_is_seed_deterministic_and_keeps_ema() {
    let d = pipeline();
    let w = TempDir::new().unwrap();
    let cfg = d.join("config.json");
    let cfg = cfg.to_str().unwrap();
    let clouds = d.join("ad/clouds");
    let clouds = clouds.to_str().unwrap();
    ok(w.path(), &["--config", cfg, "train-diffusion", "--clouds", clouds, "--out", "again"]);
    assert_eq!(snapshot(&d.join("diff")), snapshot(&w.path().join("again")));
    ok(w.path(), &["--config", cfg, "--seed", "1", "train-diffusion", "--clouds", clouds, "--out", "other"]);
    assert_ne!(std::fs::read(d.join("diff/loss.csv")).unwrap(), std::fs::read(w.path().join("other/loss.csv")).unwrap());

    let raw = npcd::diff::load_params(&d.join("diff/checkpoint/denoiser.params")).unwrap();
    let ema = npcd::diff::load_params(&d.join("diff/checkpoint/ema.params")).unwrap();
    assert_ne!(raw.values_only(), ema.values_only());
    assert_eq!(loss_column(&d.join("diff/loss.csv"), 1).len(), 40);
}

#[test]
fn diffusion_rejects_mismatched_denoiser() {
    let d = pipeline();
    let w = workspace(&TINY.replace(r#""num_points": 16"#, r#""num_points": 32"#));
    let clouds = d.join("ad/clouds");
    let r = npcd(w.path(), &["--config", "config.json", "train-diffusion", "--clouds", clouds.to_str().unwrap(), "--out", "x"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("num_points") || r.stderr.contains("16x8"), "{}", r.stderr);
}

fn in_pipeline(args: &[&str]) -> Run {
    let mut full = vec!["--config", "config.json"];
    full.extend_from_slice(args);
    npcd(pipeline(), &full)
}

#[test]
fn unconditional_sampling_is_reproducible_with_trajectory() {
    let d = pipeline();
    assert_eq!(in_pipeline(&["sample", "--checkpoint", "diff", "--out", "u1", "--trajectory", "--decoder", "ad"]).code, 0);
    assert_eq!(in_pipeline(&["sample", "--checkpoint", "diff", "--out", "u2", "--trajectory", "--decoder", "ad"]).code, 0);
    assert_eq!(snapshot(&d.join("u1")), snapshot(&d.join("u2")));
    // T = 200 and a dump every 100 steps: t = 200, 100, 0.
    let states = std::fs::read_dir(d.join("u1/trajectory/sample_000")).unwrap().count();
    assert_eq!(states, 200 / 100 + 1);
    assert_eq!(std::fs::read_dir(d.join("u1/renders")).unwrap().count(), 4);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("u1/samples.json")).unwrap()).unwrap();
    assert_eq!(summary["samples"][0]["denoiser_calls"], 200);
    assert_eq!(summary["config_hash"], provenance(&d.join("u1"))["config_hash"]);

    assert_eq!(in_pipeline(&["--seed", "8", "sample", "--checkpoint", "diff", "--out", "u3"]).code, 0);
    assert_ne!(std::fs::read(d.join("u1/sample_000.npcd")).unwrap(), std::fs::read(d.join("u3/sample_000.npcd")).unwrap());
}

#[test]
fn appearance_only_with_zero_n_rev_keeps_input_positions() {
    let d = pipeline();
    let input = "ad/clouds/0001-chair-like.npcd";
    let r = in_pipeline(&["sample", "--checkpoint", "diff", "--out", "app", "--mode", "appearance-only", "--input", input, "--n-rev", "0", "--n-repaint", "20", "--n-resample", "2"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let given = point_cloud::load(&d.join(input)).unwrap();
    for k in 0..2 {
        let out = point_cloud::load(&d.join(format!("app/sample_{k:03}.npcd"))).unwrap();
        assert_eq!(out.positions(), given.positions());
    }
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("app/samples.json")).unwrap()).unwrap();
    assert_eq!(summary["samples"][0]["denoiser_calls"], 200 + 2 * 20);

    let r = in_pipeline(&["sample", "--checkpoint", "diff", "--out", "shape", "--mode", "shape-only", "--input", input, "--n-rev", "0"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let out = point_cloud::load(&d.join("shape/sample_000.npcd")).unwrap();
    assert_eq!(out.features(), given.features());
}

#[test]
fn conditional_sampling_without_input_exits_2() {
    let r = in_pipeline(&["sample", "--checkpoint", "diff", "--out", "bad1", "--mode", "shape-only"]);
    assert_eq!(r.code, 2);
    let r = in_pipeline(&["sample", "--checkpoint", "diff", "--out", "bad2", "--preset", "chairs-shape"]);
    assert_eq!(r.code, 2);
}

#[test]
fn preset_conflicts_and_unknown_presets_exit_2() {
    let input = "ad/clouds/0000-chair-like.npcd";
    let r = in_pipeline(&["sample", "--checkpoint", "diff", "--out", "p1", "--preset", "chairs-shape", "--mode", "appearance-only", "--input", input]);
    assert_eq!(r.code, 2);
    let r = in_pipeline(&["sample", "--checkpoint", "diff", "--out", "p2", "--preset", "no-such-preset", "--input", input]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("srn-chairs-appearance"));
}

#[test]
fn preset_sets_knobs_in_the_hashed_config() {
    let d = pipeline();
    let input = "ad/clouds/0000-chair-like.npcd";
    let r = in_pipeline(&["sample", "--checkpoint", "diff", "--out", "pre", "--preset", "cars-shape", "--input", input, "--num-samples", "1"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let p = provenance(&d.join("pre"));
    assert_eq!(p["config"]["sampler"]["n_rev"], 50);
    assert_eq!(p["config"]["sampler"]["preset"], "cars-shape");
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("pre/samples.json")).unwrap()).unwrap();
    assert_eq!(summary["mode"], "shape-only");
}

#[test]
fn eval_twins_and_report_fields() {
    let d = pipeline();
    let r = in_pipeline(&["eval", "--generated", "ad/clouds", "--reference", "ad/clouds", "--out", "ev"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("ev/report.json")).unwrap()).unwrap();
    assert_eq!(rep["metrics"][0]["value"], 0.0);
    assert_eq!(rep["metrics"][1]["value"], 0.0);
    assert_eq!(rep["metrics"][0]["convention"], npcd::metrics::CHAMFER_CONVENTION);
    assert_eq!(rep["metrics"][1]["convention"], npcd::metrics::EMD_CONVENTION);
    assert_eq!(rep["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn eval_renders_scores_psnr_and_retrieval() {
    let d = pipeline();
    assert_eq!(in_pipeline(&["render", "--decoder", "ad", "--cloud", "ad/clouds/0000-chair-like.npcd", "--out", "rend", "--views", "3"]).code, 0);
    let r = in_pipeline(&[
        "eval", "--generated", "ad/clouds", "--reference", "ad/clouds", "--metrics", "chamfer",
        "--generated-renders", "rend", "--reference-renders", "rend", "--out", "evr",
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("evr/report.json")).unwrap()).unwrap();
    assert_eq!(rep["metrics"].as_array().unwrap().len(), 1);
    assert_eq!(rep["renders"]["matched"], 3);
    assert_eq!(rep["renders"]["retrieval"][1]["nearest"], "view_001");
}

#[test]
fn eval_empty_directory_and_bad_metric_exit_2() {
    let d = pipeline();
    std::fs::create_dir_all(d.join("empty")).unwrap();
    assert_eq!(in_pipeline(&["eval", "--generated", "empty", "--reference", "ad/clouds", "--out", "e1"]).code, 2);
    assert_eq!(in_pipeline(&["eval", "--generated", "ad/clouds", "--reference", "ad/clouds", "--metrics", "fid", "--out", "e2"]).code, 2);
}

#[test]
fn eval_refuses_mismatched_normalization() {
    let d = pipeline();
    let other = d.join("renormalized");
    std::fs::create_dir_all(&other).unwrap();
    for f in std::fs::read_dir(d.join("ad/clouds")).unwrap() {
        let p = f.unwrap().path();
        std::fs::copy(&p, other.join(p.file_name().unwrap())).unwrap();
    }
    let mut stats = npcd::point_cloud::NormalizationStats::load_json(&other.join("normalization.json")).unwrap();
    stats.position_scale *= 2.0;
    stats.save_json(&other.join("normalization.json")).unwrap();
    let r = in_pipeline(&["eval", "--generated", "renormalized", "--reference", "ad/clouds", "--out", "e3"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("normalization"));
}

#[test]
fn eval_disjoint_halves_near_chance() {
    let cfg = r#"{"dataset": {"n_objects": 48, "views_per_object": 1, "m_points": 32, "n_dense": 512, "rig": {"image_size": 2}}}"#;
    let w = workspace(cfg);
    let d = w.path();
    ok(d, &["--config", "config.json", "gen-data", "--out", "data"]);
    for half in ["a", "b"] {
        std::fs::create_dir_all(d.join(half)).unwrap();
    }
    let mut objects: Vec<PathBuf> = std::fs::read_dir(d.join("data/objects")).unwrap().map(|e| e.unwrap().path()).collect();
    objects.sort();
    for (i, o) in objects.iter().enumerate() {
        let half = if i % 2 == 0 { "a" } else { "b" };
        std::fs::copy(o.join("points.npcd"), d.join(half).join(format!("{i:03}.npcd"))).unwrap();
    }
    ok(d, &["--config", "config.json", "eval", "--generated", "a", "--reference", "b", "--metrics", "chamfer", "--out", "ev"]);
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("ev/report.json")).unwrap()).unwrap();
    let v = rep["metrics"][0]["value"].as_f64().unwrap();
    assert!((0.25..=0.75).contains(&v), "1-NNA {v}");
}

#[test]
fn thread_count_comes_from_environment() {
    let w = workspace(TINY);
    let out = Command::new(env!("CARGO_BIN_EXE_npcd"))
        .current_dir(w.path())
        .env("NPCD_THREADS", "lots")
        .args(["gen-data", "--out", "data"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_npcd"))
        .current_dir(w.path())
        .env("NPCD_THREADS", "1")
        .args(["--config", "config.json", "gen-data", "--out", "data"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
}
