//! Output-directory plumbing: locking, provenance stamps, directory listings.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use npcd::point_cloud::{self, NeuralPointCloud, NormalizationStats};
use npcd::render::{DecoderConfig, DecoderParams, RenderConfig};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const LOCK_FILE: &str = ".npcd.lock";
pub const PROVENANCE_FILE: &str = "provenance.json";
pub const NORMALIZATION_FILE: &str = "normalization.json";
pub const CLIP_FILE: &str = "clip.json";
pub const DECODER_PARAMS: &str = "decoder.params";
pub const DECODER_META: &str = "decoder.json";

/// Exclusive ownership of an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
    _file: File,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        let file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                CliError::Io(format!("{} is locked by another run (remove {} if stale)", dir.display(), path.display()))
            } else {
                CliError::io(&path, e)
            }
        })?;
        Ok(Self { path, _file: file })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    pub config: RunConfig,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(path, e))
}

pub fn stamp(dir: &Path, command: &str, config: &RunConfig) -> CliResult<()> {
    let p = Provenance { command: command.into(), config_hash: config.hash(), config: config.clone() };
    write_json(&dir.join(PROVENANCE_FILE), &p)
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Files in `dir` with extension `ext`, sorted by name.
pub fn list_files(dir: &Path, ext: &str) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == ext) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// All NPCD clouds in `dir`; an empty directory is a configuration error.
pub fn load_clouds(dir: &Path) -> CliResult<Vec<(String, NeuralPointCloud)>> {
    let files = list_files(dir, "npcd")?;
    if files.is_empty() {
        return Err(CliError::Config(format!("{} contains no .npcd files", dir.display())));
    }
    files.iter().map(|f| Ok((file_stem(f), point_cloud::load(f)?))).collect()
}

pub fn load_normalization(dir: &Path) -> CliResult<NormalizationStats> {
    Ok(NormalizationStats::load_json(&dir.join(NORMALIZATION_FILE))?)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DecoderMeta {
    pub decoder: DecoderConfig,
    pub render: RenderConfig,
    pub config_hash: String,
}

pub fn save_decoder(dir: &Path, decoder: &DecoderParams, render: &RenderConfig, config_hash: &str) -> CliResult<()> {
    npcd::diff::save_params(&dir.join(DECODER_PARAMS), &decoder.store, false)?;
    let meta = DecoderMeta { decoder: decoder.config.clone(), render: render.clone(), config_hash: config_hash.into() };
    write_json(&dir.join(DECODER_META), &meta)
}

pub fn load_decoder(dir: &Path) -> CliResult<(DecoderParams, RenderConfig)> {
    let meta: DecoderMeta = read_json(&dir.join(DECODER_META))?;
    let store = npcd::diff::load_params(&dir.join(DECODER_PARAMS))?;
    Ok((DecoderParams::from_store(meta.decoder, store)?, meta.render))
}
