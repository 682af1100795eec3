use std::path::Path;

use npcd::autodecoder::AutodecoderConfig;
use npcd::diffusion::DiffusionConfig;
use npcd::metrics::SetDistance;
use npcd::toy::DatasetConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Sampling knobs; an explicit preset overrides `n_rev`, `n_repaint` and `n_resample`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub preset: Option<String>,
    pub n_rev: usize,
    pub n_repaint: usize,
    pub n_resample: usize,
    pub num_samples: usize,
    /// Views rendered per sample when a decoder is given and no camera file.
    pub render_views: usize,
    pub seed: u64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { preset: None, n_rev: 0, n_repaint: 0, n_resample: 0, num_samples: 1, render_views: 4, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub metrics: Vec<SetDistance>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { metrics: vec![SetDistance::Chamfer, SetDistance::Emd] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub autodecoder: AutodecoderConfig,
    pub diffusion: DiffusionConfig,
    pub sampler: SamplerSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::parse(&text).map_err(|e| match e {
                    CliError::Config(m) => CliError::Config(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
        }
    }

    /// One seed for every stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.autodecoder.seed = seed;
        self.diffusion.seed = seed;
        self.sampler.seed = seed;
    }

    /// SHA-256 of the canonical JSON form (sorted keys, defaults filled in).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_vec(&value).expect("value serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}
