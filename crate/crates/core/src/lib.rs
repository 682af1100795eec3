//! Neural point cloud diffusion.
//!
//! A neural point cloud pairs `M` point positions with `M` latent feature
//! vectors. A shared decoder renders it volumetrically; an autodecoder fits
//! per-object features against multi-view images; a DDPM learns the joint
//! distribution of positions and features; and a masked sampler generates
//! one modality while holding the other fixed.

mod binio;
pub mod diff;
pub mod error;
pub mod geom;
pub mod point_cloud;
pub mod render;
pub mod seeding;
pub mod toy;
pub mod autodecoder;
pub mod metrics;
pub mod diffusion;
pub mod sampler;

pub use error::{Error, Result};
