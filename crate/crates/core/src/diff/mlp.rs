use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::{Mat, Tape, Var};
use crate::error::{Error, Result};

/// Negative slope used by every leaky rectifier in the decoder.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Gelu,
    Linear,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu { slope: LEAKY_SLOPE }
    }
}

/// A fully connected network: `widths[0]` inputs, `widths[last]` outputs,
/// `activation` after every layer except the last, whose output is linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub name: String,
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(name: impl Into<String>, widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            widths,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config(format!("MLP '{}' needs at least one layer", self.name)));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!("MLP '{}' has a zero width: {:?}", self.name, self.widths)));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.{}.weight", self.name, layer)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.{}.bias", self.name, layer)
    }

    /// Kaiming-uniform weights and zero biases.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let gain_sq = match self.activation {
            Activation::LeakyRelu { slope } => 2.0 / (1.0 + slope * slope),
            Activation::Gelu => 2.0,
            Activation::Linear => 1.0,
        };
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let g = if l + 1 == self.num_layers() { 1.0 } else { gain_sq };
            let bound = (3.0 * g / fan_in as f64).sqrt();
            let w = Mat::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-bound..bound));
            store.insert(self.weight_name(l), w);
            store.insert(self.bias_name(l), Mat::zeros((1, fan_out)));
        }
    }

    /// Zeroes the output projection so the network initially predicts zero.
    pub fn zero_output_layer(&self, store: &mut ParamStore) {
        let l = self.num_layers() - 1;
        for name in [self.weight_name(l), self.bias_name(l)] {
            if let Some(v) = store.value_mut(&name) {
                v.fill(0.0);
            }
        }
    }

    /// Evaluates the network on the rows of `input`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<Var> {
        let mut h = input;
        for l in 0..self.num_layers() {
            let cols = tape.value(h).ncols();
            if cols != self.widths[l] {
                return Err(Error::dim(
                    format!("{} layer {}", self.name, l),
                    format!("{} input columns", self.widths[l]),
                    cols,
                ));
            }
            let w = tape.param(store, &self.weight_name(l))?;
            let b = tape.param(store, &self.bias_name(l))?;
            if tape.value(w).dim() != (self.widths[l], self.widths[l + 1]) {
                return Err(Error::dim(
                    format!("{} layer {} weight", self.name, l),
                    format!("{}x{}", self.widths[l], self.widths[l + 1]),
                    format!("{:?}", tape.value(w).dim()),
                ));
            }
            let z = tape.matmul(h, w)?;
            h = tape.add_row(z, b)?;
            if l + 1 < self.num_layers() {
                h = match self.activation {
                    Activation::LeakyRelu { slope } => tape.leaky_relu(h, slope),
                    Activation::Gelu => tape.gelu(h),
                    Activation::Linear => h,
                };
            }
        }
        Ok(h)
    }

    /// Convenience evaluation without keeping the tape.
    pub fn eval(&self, store: &ParamStore, input: &Mat) -> Result<Mat> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, store, x)?;
        Ok(tape.value(y).clone())
    }
}
