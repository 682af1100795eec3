use std::collections::BTreeMap;

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::tape::Mat;
use crate::error::{Error, Result};

/// Storage precision of optimizer state.
///
/// Arithmetic always runs in 64-bit. In `F32` mode every parameter and Adam
/// moment is rounded to the nearest 32-bit float after each update, so the
/// state is exactly representable by the 32-bit checkpoint formats and a
/// resumed run continues bit-identically.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F64 => x,
            Precision::F32 => x as f32 as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Mat,
    pub grad: Mat,
    pub m: Mat,
    pub v: Mat,
}

impl Param {
    fn new(value: Mat) -> Self {
        let dim = value.dim();
        Self {
            value,
            grad: Mat::zeros(dim),
            m: Mat::zeros(dim),
            v: Mat::zeros(dim),
        }
    }
}

/// Named parameters with gradient accumulators and Adam moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
    /// Number of optimizer steps taken.
    pub step: u64,
    pub precision: Precision,
}

impl ParamStore {
    pub fn new(precision: Precision) -> Self {
        Self {
            entries: BTreeMap::new(),
            step: 0,
            precision,
        }
    }

    /// Inserts or replaces a parameter, resetting its gradient and moments.
    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        let value = value.mapv(|x| self.precision.round(x));
        self.entries.insert(name.into(), Param::new(value));
    }

    pub(crate) fn insert_full(&mut self, name: String, param: Param) {
        self.entries.insert(name, param);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Option<&Mat> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Mat> {
        self.entries.get(name).map(|p| &p.grad)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Adds `g` to the accumulator of `name`; names not owned by this store are ignored.
    pub fn accumulate_grad(&mut self, name: &str, g: &Mat) {
        if let Some(p) = self.entries.get_mut(name) {
            p.grad += g;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// `self <- decay * self + (1 - decay) * other`, elementwise over matching entries.
    pub fn ema_update(&mut self, other: &ParamStore, decay: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay {decay} outside [0, 1]")));
        }
        if self.entries.len() != other.entries.len() {
            return Err(Error::Argument(format!(
                "EMA structure mismatch: {} vs {} entries",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (name, p) in &self.entries {
            match other.entries.get(name) {
                Some(o) if o.value.dim() == p.value.dim() => {}
                _ => return Err(Error::Argument(format!("EMA structure mismatch at '{name}'"))),
            }
        }
        let precision = self.precision;
        for (name, p) in self.entries.iter_mut() {
            let o = &other.entries[name];
            Zip::from(&mut p.value)
                .and(&o.value)
                .for_each(|e, &x| *e = precision.round(decay * *e + (1.0 - decay) * x));
        }
        Ok(())
    }

    /// Parameter values only (no gradients or moments), e.g. to snapshot an EMA copy.
    pub fn values_only(&self) -> ParamStore {
        let mut out = ParamStore::new(self.precision);
        for (name, p) in &self.entries {
            out.insert(name.clone(), p.value.clone());
        }
        out.step = self.step;
        out
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.value.iter().all(|x| x.is_finite()))
    }
}
