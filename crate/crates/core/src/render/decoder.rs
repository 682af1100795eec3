use rand::Rng;
use serde::{Deserialize, Serialize};

use super::neighbors::Neighbor;
use crate::diff::{sigmoid_scalar, softplus, Activation, Mat, MlpSpec, ParamStore, Precision, Tape, Var, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::geom::Vec3;

/// Widths of the three decoder networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub feature_dim: usize,
    pub hidden_width: usize,
    /// Width of the aggregated shading feature.
    pub shading_dim: usize,
    pub aggregation_hidden_layers: usize,
    pub color_hidden_layers: usize,
    pub density_hidden_layers: usize,
    pub negative_slope: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            hidden_width: 256,
            shading_dim: 256,
            aggregation_hidden_layers: 4,
            color_hidden_layers: 4,
            density_hidden_layers: 1,
            negative_slope: LEAKY_SLOPE,
        }
    }
}

impl DecoderConfig {
    fn widths(input: usize, hidden: usize, layers: usize, output: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend(std::iter::repeat(hidden).take(layers));
        w.push(output);
        w
    }

    pub fn specs(&self) -> Result<[MlpSpec; 3]> {
        if self.feature_dim == 0 || self.hidden_width == 0 || self.shading_dim == 0 {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        let act = Activation::LeakyRelu { slope: self.negative_slope };
        Ok([
            MlpSpec::new("aggregation", Self::widths(self.feature_dim + 3, self.hidden_width, self.aggregation_hidden_layers, self.shading_dim), act)?,
            MlpSpec::new("color", Self::widths(self.shading_dim, self.hidden_width, self.color_hidden_layers, 3), act)?,
            MlpSpec::new("density", Self::widths(self.shading_dim, self.hidden_width, self.density_hidden_layers, 1), act)?,
        ])
    }
}

/// Aggregation network `F`, color network `G` and density network `H` with their weights.
#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    pub aggregation: MlpSpec,
    pub color: MlpSpec,
    pub density: MlpSpec,
    pub store: ParamStore,
}

impl DecoderParams {
    pub fn init<R: Rng + ?Sized>(config: DecoderConfig, precision: Precision, rng: &mut R) -> Result<Self> {
        let [aggregation, color, density] = config.specs()?;
        let mut store = ParamStore::new(precision);
        for spec in [&aggregation, &color, &density] {
            spec.init(&mut store, rng);
        }
        Ok(Self { config, aggregation, color, density, store })
    }

    /// Wraps existing weights, checking every expected tensor is present with the right shape.
    pub fn from_store(config: DecoderConfig, store: ParamStore) -> Result<Self> {
        let [aggregation, color, density] = config.specs()?;
        for spec in [&aggregation, &color, &density] {
            for l in 0..spec.num_layers() {
                for (name, shape) in [
                    (spec.weight_name(l), (spec.widths[l], spec.widths[l + 1])),
                    (spec.bias_name(l), (1, spec.widths[l + 1])),
                ] {
                    match store.value(&name) {
                        Some(v) if v.dim() == shape => {}
                        Some(v) => return Err(Error::dim(name, format!("{shape:?}"), format!("{:?}", v.dim()))),
                        None => return Err(Error::Format(format!("decoder checkpoint is missing {name}"))),
                    }
                }
            }
        }
        Ok(Self { config, aggregation, color, density, store })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// Shading features `N x shading_dim` to sigmoid colors `N x 3` and softplus densities `N x 1`.
    pub fn decode(&self, tape: &mut Tape, shading: Var) -> Result<(Var, Var)> {
        let c = self.color.forward(tape, &self.store, shading)?;
        let c = tape.sigmoid(c);
        let s = self.density.forward(tape, &self.store, shading)?;
        let s = tape.softplus(s);
        Ok((c, s))
    }
}

/// Inverse-distance weights, normalized to sum to one.
pub fn aggregation_weights(distances: &[f64], eps: f64) -> Vec<f64> {
    let raw: Vec<f64> = distances.iter().map(|&d| 1.0 / d.max(eps)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

/// Shading feature at `q`: inverse-distance weighted mean of `F(f_i, q - p_i)` over `neighbors`.
pub fn aggregate_feature(
    aggregation: &MlpSpec,
    store: &ParamStore,
    positions: &Mat,
    features: &Mat,
    q: Vec3,
    neighbors: &[Neighbor],
    distance_epsilon: f64,
) -> Result<Vec<f64>> {
    if neighbors.is_empty() {
        return Err(Error::Argument("aggregate_feature needs at least one neighbor".into()));
    }
    let d = features.ncols();
    let input = Mat::from_shape_fn((neighbors.len(), d + 3), |(r, c)| {
        let i = neighbors[r].index;
        if c < d {
            features[[i, c]]
        } else {
            q[c - d] - positions[[i, c - d]]
        }
    });
    let out = aggregation.eval(store, &input)?;
    let dists: Vec<f64> = neighbors.iter().map(|n| n.distance).collect();
    let w = aggregation_weights(&dists, distance_epsilon);
    let mut f = vec![0.0; out.ncols()];
    for (r, wr) in w.iter().enumerate() {
        for (c, v) in f.iter_mut().enumerate() {
            *v += wr * out[[r, c]];
        }
    }
    Ok(f)
}

/// Color and density for one shading feature; `None` (no neighbors) is empty space.
pub fn decode_radiance(decoder: &DecoderParams, shading: Option<&[f64]>, background: [f64; 3]) -> Result<([f64; 3], f64)> {
    let Some(f) = shading else {
        return Ok((background, 0.0));
    };
    let x = Mat::from_shape_vec((1, f.len()), f.to_vec()).map_err(|_| Error::dim("decode_radiance", "1xW", f.len()))?;
    let c = decoder.color.eval(&decoder.store, &x)?;
    let s = decoder.density.eval(&decoder.store, &x)?;
    Ok((
        [sigmoid_scalar(c[[0, 0]]), sigmoid_scalar(c[[0, 1]]), sigmoid_scalar(c[[0, 2]])],
        softplus(s[[0, 0]]),
    ))
}
