//! Differentiable-computation substrate: matrix tape, MLPs, Adam, gradient checking.

mod adam;
mod checkpoint;
mod gradcheck;
mod mlp;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig};
pub use checkpoint::{load_params, read_params, save_params, write_params, PARAM_MAGIC, PARAM_VERSION};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, FD_STEP, REL_FLOOR};
pub use mlp::{Activation, MlpSpec, LEAKY_SLOPE};
pub use params::{Param, ParamStore, Precision};
pub use tape::{CompositeLayout, Gradients, Mat, Tape, Var};

pub(crate) use tape::{composite_forward, sigmoid_scalar, softplus};
