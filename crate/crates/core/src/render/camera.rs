use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{add, cross, dot, normalize, scale, sub, Vec3};

/// Pinhole camera. `rotation` is camera-to-world, row-major, with camera
/// axes x right, y down, z forward; `translation` is the camera center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub rotation: [f64; 9],
    pub translation: Vec3,
    pub focal: f64,
    pub principal_point: [f64; 2],
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        add(self.origin, scale(self.direction, t))
    }
}

impl Camera {
    /// Camera at `eye` looking at `target`, with `up` fixing the roll.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize, near: f64, far: f64) -> Result<Self> {
        let z = normalize(sub(target, eye));
        let mut x = cross(z, up);
        if dot(x, x) < 1e-12 {
            // Looking along `up`: pick any perpendicular roll.
            x = cross(z, if z[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] });
        }
        let x = normalize(x);
        let y = cross(z, x);
        let cam = Camera {
            rotation: [x[0], y[0], z[0], x[1], y[1], z[1], x[2], y[2], z[2]],
            translation: eye,
            focal,
            principal_point: [width as f64 / 2.0, height as f64 / 2.0],
            width,
            height,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[k * 3 + i] * r[k * 3 + j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (d - expect).abs() > 1e-6 {
                    return Err(Error::Argument("camera rotation is not orthonormal".into()));
                }
            }
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Argument(format!("camera needs 0 < near < far, got {} / {}", self.near, self.far)));
        }
        if !(self.focal > 0.0) {
            return Err(Error::Argument(format!("focal length must be positive, got {}", self.focal)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Argument("camera image size must be positive".into()));
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("camera translation must be finite".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    /// World-space optical axis.
    pub fn forward(&self) -> Vec3 {
        [self.rotation[2], self.rotation[5], self.rotation[8]]
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            r[0] * v[0] + r[1] * v[1] + r[2] * v[2],
            r[3] * v[0] + r[4] * v[1] + r[5] * v[2],
            r[6] * v[0] + r[7] * v[1] + r[8] * v[2],
        ]
    }

    /// Ray through the center of pixel (`u`, `v`), column `u`, row `v`.
    pub fn ray(&self, u: usize, v: usize) -> Ray {
        let d = [
            (u as f64 + 0.5 - self.principal_point[0]) / self.focal,
            (v as f64 + 0.5 - self.principal_point[1]) / self.focal,
            1.0,
        ];
        Ray {
            origin: self.translation,
            direction: normalize(self.rotate(d)),
        }
    }

    /// Projects a world point to continuous pixel coordinates; `None` behind the camera.
    pub fn project(&self, p: Vec3) -> Option<[f64; 2]> {
        let rel = sub(p, self.translation);
        let r = &self.rotation;
        let c = [
            r[0] * rel[0] + r[3] * rel[1] + r[6] * rel[2],
            r[1] * rel[0] + r[4] * rel[1] + r[7] * rel[2],
            r[2] * rel[0] + r[5] * rel[1] + r[8] * rel[2],
        ];
        if c[2] <= 0.0 {
            return None;
        }
        Some([
            self.focal * c[0] / c[2] + self.principal_point[0],
            self.focal * c[1] / c[2] + self.principal_point[1],
        ])
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Focal length giving a horizontal field of view of `fov_degrees`.
    pub fn focal_from_fov(width: usize, fov_degrees: f64) -> f64 {
        width as f64 / 2.0 / (fov_degrees.to_radians() / 2.0).tan()
    }
}

/// One ray per pixel, row-major.
pub fn generate_rays(camera: &Camera) -> Vec<Ray> {
    let mut rays = Vec::with_capacity(camera.num_pixels());
    for v in 0..camera.height {
        for u in 0..camera.width {
            rays.push(camera.ray(u, v));
        }
    }
    rays
}

/// Reads a camera set: `{"views": [camera, ...]}`.
pub fn load_cameras(path: &std::path::Path) -> Result<Vec<Camera>> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct CameraSet {
        views: Vec<Camera>,
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let set: CameraSet = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    for c in &set.views {
        c.validate()?;
    }
    Ok(set.views)
}

pub fn save_cameras(path: &std::path::Path, cameras: &[Camera]) -> Result<()> {
    #[derive(Serialize)]
    struct CameraSet<'a> {
        views: &'a [Camera],
    }
    let text = serde_json::to_string_pretty(&CameraSet { views: cameras }).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
