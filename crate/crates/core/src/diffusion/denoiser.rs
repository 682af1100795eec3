use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Activation, Mat, MlpSpec, ParamStore, Precision, Tape, Var};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    /// Points per cloud.
    pub num_points: usize,
    pub feature_dim: usize,
    pub time_embedding_dim: usize,
    /// Hidden width of each block's MLP as a multiple of `model_dim`.
    pub mlp_ratio: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { layers: 4, model_dim: 64, heads: 4, num_points: 64, feature_dim: 8, time_embedding_dim: 64, mlp_ratio: 4 }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.num_points == 0 || self.feature_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("num_points, feature_dim and mlp_ratio must be positive".into()));
        }
        if self.time_embedding_dim == 0 || self.time_embedding_dim % 2 != 0 {
            return Err(Error::Config(format!("time_embedding_dim {} must be positive and even", self.time_embedding_dim)));
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        3 + self.feature_dim
    }

    fn linear(&self, name: String, fan_in: usize, fan_out: usize) -> MlpSpec {
        MlpSpec { name, widths: vec![fan_in, fan_out], activation: Activation::Linear }
    }

    fn input_proj(&self) -> MlpSpec {
        self.linear("denoiser.input".into(), self.token_dim(), self.model_dim)
    }

    fn time_proj(&self) -> MlpSpec {
        self.linear("denoiser.time".into(), self.time_embedding_dim, self.model_dim)
    }

    fn qkv(&self, l: usize) -> MlpSpec {
        self.linear(format!("denoiser.block{l}.qkv"), self.model_dim, 3 * self.model_dim)
    }

    fn attn_out(&self, l: usize) -> MlpSpec {
        self.linear(format!("denoiser.block{l}.attn_out"), self.model_dim, self.model_dim)
    }

    fn mlp(&self, l: usize) -> MlpSpec {
        MlpSpec {
            name: format!("denoiser.block{l}.mlp"),
            widths: vec![self.model_dim, self.mlp_ratio * self.model_dim, self.model_dim],
            activation: Activation::Gelu,
        }
    }

    fn head(&self) -> MlpSpec {
        self.linear("denoiser.head".into(), self.model_dim, self.token_dim())
    }

    fn norm_names(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.layers).flat_map(|l| [format!("denoiser.block{l}.norm1"), format!("denoiser.block{l}.norm2")]).collect();
        v.push("denoiser.final_norm".into());
        v
    }
}

/// Sinusoidal encoding of a timestep as a `1 x dim` row.
pub fn timestep_embedding(t: usize, dim: usize) -> Mat {
    let half = dim / 2;
    let mut row = Mat::zeros((1, dim));
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let a = t as f64 * freq;
        row[[0, k]] = a.sin();
        row[[0, half + k]] = a.cos();
    }
    row
}

/// Row order that sorts tokens lexicographically by value, ties by index.
/// Running the network in this order makes outputs independent of input order.
fn canonical_order(tokens: &Mat) -> Vec<usize> {
    let mut order: Vec<usize> = (0..tokens.nrows()).collect();
    order.sort_by(|&a, &b| {
        for (x, y) in tokens.row(a).iter().zip(tokens.row(b).iter()) {
            match x.total_cmp(y) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        a.cmp(&b)
    });
    order
}

/// Transformer over one token per point plus one timestep token, predicting
/// the noise on positions and features.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub store: ParamStore,
}

impl Denoiser {
    /// Random weights with a zero output projection, so the initial prediction is zero.
    pub fn init<R: Rng + ?Sized>(config: DenoiserConfig, precision: Precision, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(precision);
        config.input_proj().init(&mut store, rng);
        config.time_proj().init(&mut store, rng);
        for l in 0..config.layers {
            config.qkv(l).init(&mut store, rng);
            config.attn_out(l).init(&mut store, rng);
            config.mlp(l).init(&mut store, rng);
        }
        for n in config.norm_names() {
            store.insert(format!("{n}.gain"), Mat::ones((1, config.model_dim)));
            store.insert(format!("{n}.bias"), Mat::zeros((1, config.model_dim)));
        }
        let head = config.head();
        head.init(&mut store, rng);
        head.zero_output_layer(&mut store);
        Ok(Self { config, store })
    }

    /// Wraps existing parameters, checking that every expected entry is present.
    pub fn from_store(config: DenoiserConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Self::init(config.clone(), store.precision, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        for (name, p) in reference.store.iter() {
            match store.value(name) {
                Some(v) if v.dim() == p.value.dim() => {}
                Some(v) => {
                    return Err(Error::dim(format!("denoiser parameter {name}"), format!("{:?}", p.value.dim()), format!("{:?}", v.dim())))
                }
                None => return Err(Error::Format(format!("denoiser checkpoint lacks '{name}'"))),
            }
        }
        Ok(Self { config, store })
    }

    fn check_shapes(&self, positions: &Mat, features: &Mat) -> Result<()> {
        let (m, d) = (self.config.num_points, self.config.feature_dim);
        if positions.dim() != (m, 3) || features.dim() != (m, d) {
            return Err(Error::dim(
                "denoiser input",
                format!("{m}x3 positions and {m}x{d} features"),
                format!("{:?} and {:?}", positions.dim(), features.dim()),
            ));
        }
        Ok(())
    }

    fn layer_norm(&self, tape: &mut Tape, store: &ParamStore, x: Var, name: &str) -> Result<Var> {
        let n = tape.layer_norm(x, LN_EPS);
        let g = tape.param(store, &format!("{name}.gain"))?;
        let b = tape.param(store, &format!("{name}.bias"))?;
        let scaled = tape.mul_row(n, g)?;
        tape.add_row(scaled, b)
    }

    fn attention(&self, tape: &mut Tape, store: &ParamStore, x: Var, l: usize) -> Result<Var> {
        let (dm, heads) = (self.config.model_dim, self.config.heads);
        let dh = dm / heads;
        let qkv = self.config.qkv(l).forward(tape, store, x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = tape.slice_cols(qkv, h * dh..(h + 1) * dh)?;
            let k = tape.slice_cols(qkv, dm + h * dh..dm + (h + 1) * dh)?;
            let v = tape.slice_cols(qkv, 2 * dm + h * dh..2 * dm + (h + 1) * dh)?;
            let s = tape.matmul_t(q, k)?;
            let s = tape.scale(s, scale);
            let p = tape.softmax_rows(s);
            outs.push(tape.matmul(p, v)?);
        }
        let o = tape.concat_cols(&outs)?;
        self.config.attn_out(l).forward(tape, store, o)
    }

    /// Builds the network on `tape` with parameters from `store`; returns
    /// `(eps_positions, eps_features)` in input row order.
    pub fn forward_on_tape(&self, tape: &mut Tape, store: &ParamStore, positions: &Mat, features: &Mat, t: usize) -> Result<(Var, Var)> {
        self.check_shapes(positions, features)?;
        let cfg = &self.config;
        let m = cfg.num_points;
        let mut tokens = Mat::zeros((m, cfg.token_dim()));
        tokens.slice_mut(ndarray::s![.., 0..3]).assign(positions);
        tokens.slice_mut(ndarray::s![.., 3..]).assign(features);
        let order = canonical_order(&tokens);
        let mut inverse = vec![0; m];
        for (rank, &i) in order.iter().enumerate() {
            inverse[i] = rank;
        }
        let x = tape.constant(tokens);
        let x = tape.gather_rows(x, order)?;
        let points = cfg.input_proj().forward(tape, store, x)?;
        let temb = tape.constant(timestep_embedding(t, cfg.time_embedding_dim));
        let time = cfg.time_proj().forward(tape, store, temb)?;
        let mut h = tape.concat_rows(&[points, time])?;
        for l in 0..cfg.layers {
            let a = self.layer_norm(tape, store, h, &format!("denoiser.block{l}.norm1"))?;
            let a = self.attention(tape, store, a, l)?;
            h = tape.add(h, a)?;
            let b = self.layer_norm(tape, store, h, &format!("denoiser.block{l}.norm2"))?;
            let b = cfg.mlp(l).forward(tape, store, b)?;
            h = tape.add(h, b)?;
        }
        let h = self.layer_norm(tape, store, h, "denoiser.final_norm")?;
        let h = tape.slice_rows(h, 0..m)?;
        let out = cfg.head().forward(tape, store, h)?;
        let out = tape.gather_rows(out, inverse)?;
        let eps_p = tape.slice_cols(out, 0..3)?;
        let eps_f = tape.slice_cols(out, 3..cfg.token_dim())?;
        Ok((eps_p, eps_f))
    }

    /// Noise prediction with this denoiser's own parameters.
    pub fn predict_with(&self, store: &ParamStore, positions: &Mat, features: &Mat, t: usize) -> Result<(Mat, Mat)> {
        let mut tape = Tape::new();
        let (p, f) = self.forward_on_tape(&mut tape, store, positions, features, t)?;
        Ok((tape.value(p).clone(), tape.value(f).clone()))
    }
}

/// Anything that predicts `(eps_positions, eps_features)` for a noisy cloud at step `t`.
pub trait NoisePredictor {
    fn predict(&self, positions: &Mat, features: &Mat, t: usize) -> Result<(Mat, Mat)>;
}

impl NoisePredictor for Denoiser {
    fn predict(&self, positions: &Mat, features: &Mat, t: usize) -> Result<(Mat, Mat)> {
        self.predict_with(&self.store, positions, features, t)
    }
}

impl<F> NoisePredictor for F
where
    F: Fn(&Mat, &Mat, usize) -> Result<(Mat, Mat)>,
{
    fn predict(&self, positions: &Mat, features: &Mat, t: usize) -> Result<(Mat, Mat)> {
        self(positions, features, t)
    }
}
