use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cameras::{sample_camera_poses, CameraRig, PoseMode};
use super::object::{generate_toy_object, reference_render, ObjectClass, ToyObject};
use super::points::extract_points;
use crate::autodecoder::ObjectRecord;
use crate::diff::Mat;
use crate::error::{Error, Result};
use crate::point_cloud::{self, NeuralPointCloud};
use crate::render::{load_cameras, save_cameras, Image, View};
use crate::seeding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_objects: usize,
    pub views_per_object: usize,
    pub m_points: usize,
    pub n_dense: usize,
    /// Cycled over objects.
    pub classes: Vec<ObjectClass>,
    /// Trailing objects held out as the test split.
    pub n_test: usize,
    pub rig: CameraRig,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_objects: 8,
            views_per_object: 16,
            m_points: 64,
            n_dense: 4096,
            classes: vec![ObjectClass::ChairLike],
            n_test: 0,
            rig: CameraRig::default(),
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_objects == 0 || self.views_per_object == 0 || self.m_points == 0 || self.classes.is_empty() {
            return Err(Error::Config("dataset counts and class list must be non-empty".into()));
        }
        if self.m_points > self.n_dense {
            return Err(Error::Config(format!("m_points {} exceeds n_dense {}", self.m_points, self.n_dense)));
        }
        if self.n_test >= self.n_objects {
            return Err(Error::Config("test split would leave no training objects".into()));
        }
        self.rig.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub object: ToyObject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub seed: u64,
    pub objects: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub records: Vec<ObjectRecord>,
}

impl Dataset {
    pub fn train_records(&self) -> Vec<&ObjectRecord> {
        self.records.iter().zip(&self.manifest.objects).filter(|(_, e)| e.split == Split::Train).map(|(r, _)| r).collect()
    }
}

const OBJECT_TAG: u64 = 0x4f42;
const POSE_TAG: u64 = 0x5053;
const POINT_TAG: u64 = 0x5054;

/// Generates objects, poses, reference views and point clouds; writes them
/// under `out` when given.
pub fn build_dataset(cfg: &DatasetConfig, out: Option<&Path>) -> Result<Dataset> {
    cfg.validate()?;
    let built: Vec<Result<(ManifestEntry, ObjectRecord)>> = (0..cfg.n_objects)
        .into_par_iter()
        .map(|j| {
            let class = cfg.classes[j % cfg.classes.len()];
            let mut object = generate_toy_object(seeding::mix(cfg.seed, OBJECT_TAG, j as u64), class);
            object.id = format!("{j:04}-{}", class.name());
            let positions = extract_points(&object, cfg.n_dense, cfg.m_points, seeding::mix(cfg.seed, POINT_TAG, j as u64))?;
            let cams = sample_camera_poses(cfg.views_per_object, &cfg.rig, PoseMode::Random, seeding::mix(cfg.seed, POSE_TAG, j as u64))?;
            let views = cams
                .into_iter()
                .map(|c| View::new(reference_render(&object, &c)?, c))
                .collect::<Result<Vec<_>>>()?;
            let split = if j + cfg.n_test >= cfg.n_objects { Split::Test } else { Split::Train };
            let record = ObjectRecord::new(object.id.clone(), positions, views)?;
            Ok((ManifestEntry { id: object.id.clone(), split, object }, record))
        })
        .collect();
    let mut entries = Vec::with_capacity(cfg.n_objects);
    let mut records = Vec::with_capacity(cfg.n_objects);
    for b in built {
        let (e, r) = b?;
        entries.push(e);
        records.push(r);
    }
    let ds = Dataset { manifest: Manifest { config: cfg.clone(), seed: cfg.seed, objects: entries }, records };
    if let Some(dir) = out {
        write_dataset(&ds, dir)?;
    }
    Ok(ds)
}

fn object_dir(root: &Path, id: &str) -> PathBuf {
    root.join("objects").join(id)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `points.npcd` (positions with one zero feature column), view PPMs,
/// `cameras.json` per object, and the top-level `manifest.json`.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    for rec in &ds.records {
        let dir = object_dir(root, &rec.id);
        create_dir(&dir.join("views"))?;
        let pc = NeuralPointCloud::zero_init(rec.positions.clone(), 1)?;
        point_cloud::save(&pc, &dir.join("points.npcd"))?;
        for (k, v) in rec.views.iter().enumerate() {
            v.image.save_ppm(&dir.join("views").join(format!("{k}.ppm")))?;
        }
        let cams: Vec<_> = rec.views.iter().map(|v| v.camera.clone()).collect();
        save_cameras(&dir.join("cameras.json"), &cams)?;
    }
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&ds.manifest).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

/// Reads a dataset directory written by [`write_dataset`]. Views come back
/// quantized to 8 bits.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = load_manifest(root)?;
    let records = manifest
        .objects
        .iter()
        .map(|e| {
            let dir = object_dir(root, &e.id);
            let positions: Mat = point_cloud::load(&dir.join("points.npcd"))?.into_parts().0;
            let cams = load_cameras(&dir.join("cameras.json"))?;
            let views = cams
                .into_iter()
                .enumerate()
                .map(|(k, c)| View::new(Image::load_ppm(&dir.join("views").join(format!("{k}.ppm")))?, c))
                .collect::<Result<Vec<_>>>()?;
            ObjectRecord::new(e.id.clone(), positions, views)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            n_objects: 2,
            views_per_object: 4,
            m_points: 32,
            n_dense: 512,
            classes: vec![ObjectClass::ChairLike, ObjectClass::CarLike],
            rig: CameraRig { image_size: 24, ..Default::default() },
            seed: 17,
            ..Default::default()
        }
    }

    fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn layout_and_reproducibility() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        build_dataset(&small(), Some(a.path())).unwrap();
        build_dataset(&small(), Some(b.path())).unwrap();
        let fa = files(a.path());
        assert_eq!(fa.iter().filter(|(n, _)| n.ends_with(".ppm")).count(), 8);
        assert_eq!(fa.iter().filter(|(n, _)| n.ends_with(".npcd")).count(), 2);
        assert_eq!(fa.iter().filter(|(n, _)| n.ends_with("cameras.json")).count(), 2);
        assert!(fa.iter().any(|(n, _)| n == "manifest.json"));
        assert_eq!(fa, files(b.path()));
    }

    #[test]
    fn load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset(&small(), Some(dir.path())).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        for (x, y) in back.records.iter().zip(&ds.records) {
            // Positions pass through f32.
            assert!(x.positions.iter().zip(y.positions.iter()).all(|(a, b)| (a - b).abs() < 1e-6));
            assert_eq!(x.views[0].image, y.views[0].image.quantized());
            assert_eq!(x.views[0].camera, y.views[0].camera);
        }
    }

    #[test]
    fn points_project_inside_silhouettes() {
        let ds = build_dataset(&DatasetConfig { views_per_object: 6, ..small() }, None).unwrap();
        for rec in &ds.records {
            for v in &rec.views {
                for p in rec.positions.rows() {
                    let px = v.camera.project([p[0], p[1], p[2]]).unwrap();
                    let (u, w) = (px[0].floor() as i64, px[1].floor() as i64);
                    let mut hit = false;
                    for du in -1..=1 {
                        for dv in -1..=1 {
                            let (x, y) = (u + du, w + dv);
                            if x >= 0 && y >= 0 && (x as usize) < v.image.width && (y as usize) < v.image.height {
                                hit |= v.image.pixel(x as usize, y as usize) != [1.0; 3];
                            }
                        }
                    }
                    assert!(hit, "{} point {:?} projects to background", rec.id, p);
                }
            }
        }
    }

    #[test]
    fn splits() {
        let ds = build_dataset(&DatasetConfig { n_objects: 3, n_test: 1, n_dense: 256, m_points: 16, views_per_object: 1, ..small() }, None).unwrap();
        let s: Vec<Split> = ds.manifest.objects.iter().map(|e| e.split).collect();
        assert_eq!(s, vec![Split::Train, Split::Train, Split::Test]);
        assert_eq!(ds.train_records().len(), 2);
    }
}
