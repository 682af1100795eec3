use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::Camera;
use crate::seeding;

/// Circumradius of the unit cube every toy object fits in.
pub const UNIT_CUBE_BOUND: f64 = 0.866_025_403_784_438_6;

/// Intrinsics and orbit shared by all views of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraRig {
    pub radius: f64,
    pub fov_degrees: f64,
    pub image_size: usize,
    /// Radius of a sphere around the origin containing the object.
    pub bound: f64,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self { radius: 1.8, fov_degrees: 50.0, image_size: 32, bound: UNIT_CUBE_BOUND }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseMode {
    /// Uniform directions on the sphere.
    Random,
    /// Deterministic spiral over the upper hemisphere.
    Spiral,
}

/// Near and far planes bracketing a sphere of radius `bound` seen from distance
/// `radius`, padded by 0.1 and rounded outward to the 0.1 grid.
pub fn near_far(radius: f64, bound: f64) -> (f64, f64) {
    // Rounded at 1e-9 first so values like 20.000000001 do not spill to the next step.
    let near = (((radius - bound - 0.1) * 10.0 * 1e9).round() / 1e9).floor() / 10.0;
    let far = (((radius + bound + 0.1) * 10.0 * 1e9).round() / 1e9).ceil() / 10.0;
    (near.max(0.1), far)
}

impl CameraRig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > self.bound && self.bound > 0.0) {
            return Err(Error::Argument(format!("camera radius {} must exceed the object bound {}", self.radius, self.bound)));
        }
        if !(self.fov_degrees > 0.0 && self.fov_degrees < 180.0) || self.image_size == 0 {
            return Err(Error::Argument("invalid field of view or image size".into()));
        }
        Ok(())
    }

    /// Camera on the orbit sphere in direction `dir`, looking at the origin with +z up.
    pub fn camera(&self, dir: [f64; 3]) -> Result<Camera> {
        let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        let eye = [self.radius * dir[0] / n, self.radius * dir[1] / n, self.radius * dir[2] / n];
        let (near, far) = near_far(self.radius, self.bound);
        let f = Camera::focal_from_fov(self.image_size, self.fov_degrees);
        Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], f, self.image_size, self.image_size, near, far)
    }
}

pub fn sample_camera_poses(n: usize, rig: &CameraRig, mode: PoseMode, seed: u64) -> Result<Vec<Camera>> {
    rig.validate()?;
    match mode {
        PoseMode::Random => {
            let mut rng = seeding::rng_for(seed, 0x504f, 0);
            (0..n)
                .map(|_| loop {
                    let g: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                    if g.iter().map(|v| v * v).sum::<f64>() > 1e-12 {
                        break rig.camera(g);
                    }
                })
                .collect()
        }
        PoseMode::Spiral => {
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..n)
                .map(|i| {
                    // Equal-area heights in (0, 1) and golden-angle azimuths.
                    let z = (i as f64 + 0.5) / n as f64;
                    let r = (1.0 - z * z).sqrt();
                    let phi = golden * i as f64;
                    rig.camera([r * phi.cos(), r * phi.sin(), z])
                })
                .collect()
        }
    }
}
