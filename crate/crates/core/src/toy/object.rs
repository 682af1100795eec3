use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::render::{generate_rays, Camera, Image, Ray};
use crate::seeding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Box,
    Ellipsoid,
}

/// Axis-aligned box (half-extents) or ellipsoid (radii) with a flat color.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub center: Vec3,
    pub half: Vec3,
    pub color: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectClass {
    ChairLike,
    CarLike,
}

impl ObjectClass {
    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::ChairLike => "chair-like",
            ObjectClass::CarLike => "car-like",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyObject {
    pub id: String,
    pub class: ObjectClass,
    pub primitives: Vec<Primitive>,
}

fn slab_hit(p: &Primitive, ray: &Ray) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let lo = p.center[a] - p.half[a];
        let hi = p.center[a] + p.half[a];
        let o = ray.origin[a];
        let d = ray.direction[a];
        if d == 0.0 {
            if o < lo || o > hi {
                return None;
            }
            continue;
        }
        let (ta, tb) = ((lo - o) / d, (hi - o) / d);
        let (ta, tb) = if ta < tb { (ta, tb) } else { (tb, ta) };
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 <= t1).then_some(t0)
}

fn ellipsoid_hit(p: &Primitive, ray: &Ray) -> Option<f64> {
    // Scale to the unit sphere; ray parameters are preserved.
    let o: Vec3 = std::array::from_fn(|a| (ray.origin[a] - p.center[a]) / p.half[a]);
    let d: Vec3 = std::array::from_fn(|a| ray.direction[a] / p.half[a]);
    let a = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    let b = 2.0 * (o[0] * d[0] + o[1] * d[1] + o[2] * d[2]);
    let c = o[0] * o[0] + o[1] * o[1] + o[2] * o[2] - 1.0;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    Some((-b - disc.sqrt()) / (2.0 * a))
}

impl Primitive {
    /// Entry depth of `ray` into the primitive, if the ray meets it.
    pub fn intersect(&self, ray: &Ray) -> Option<f64> {
        match self.kind {
            PrimitiveKind::Box => slab_hit(self, ray),
            PrimitiveKind::Ellipsoid => ellipsoid_hit(self, ray),
        }
    }

    /// Zero on the surface, negative inside: box distance, or the
    /// normalized-radius residual for ellipsoids.
    pub fn surface_residual(&self, p: Vec3) -> f64 {
        match self.kind {
            PrimitiveKind::Box => {
                let q: Vec3 = std::array::from_fn(|a| (p[a] - self.center[a]).abs() - self.half[a]);
                let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            PrimitiveKind::Ellipsoid => {
                let r: f64 = (0..3).map(|a| ((p[a] - self.center[a]) / self.half[a]).powi(2)).sum();
                r.sqrt() - 1.0
            }
        }
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        (
            std::array::from_fn(|a| self.center[a] - self.half[a]),
            std::array::from_fn(|a| self.center[a] + self.half[a]),
        )
    }
}

impl ToyObject {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::Argument(format!("object {} has no primitives", self.id)));
        }
        for p in &self.primitives {
            let (lo, hi) = p.bounds();
            if lo.iter().chain(&hi).any(|v| v.abs() > 0.5 + 1e-12) || p.half.iter().any(|&h| !(h > 0.0)) {
                return Err(Error::Argument(format!("object {} has a primitive outside the unit cube", self.id)));
            }
            if p.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Argument(format!("object {} has a color outside [0, 1]", self.id)));
            }
        }
        Ok(())
    }

    /// Nearest primitive hit with depth in `[near, far]`.
    pub fn first_hit(&self, ray: &Ray, near: f64, far: f64) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some(t) = p.intersect(ray) {
                if t >= near && t <= far && best.map_or(true, |(_, bt)| t < bt) {
                    best = Some((i, t));
                }
            }
        }
        best
    }

    pub fn surface_residual(&self, p: Vec3) -> f64 {
        self.primitives.iter().map(|q| q.surface_residual(p).abs()).fold(f64::INFINITY, f64::min)
    }
}

/// Flat-albedo ray cast: the first primitive hit gives the color, misses are white.
pub fn reference_render(obj: &ToyObject, camera: &Camera) -> Result<Image> {
    camera.validate()?;
    let data = generate_rays(camera)
        .iter()
        .flat_map(|r| match obj.first_hit(r, camera.near, camera.far) {
            Some((i, _)) => obj.primitives[i].color,
            None => [1.0; 3],
        })
        .collect();
    Image::new(camera.width, camera.height, data)
}

fn color<R: Rng>(rng: &mut R) -> [f64; 3] {
    // Kept away from white so silhouettes stay visible on the background.
    std::array::from_fn(|_| rng.gen_range(0.05..0.85))
}

fn cuboid(center: Vec3, half: Vec3, color: [f64; 3]) -> Primitive {
    Primitive { kind: PrimitiveKind::Box, center, half, color }
}

fn chair<R: Rng>(rng: &mut R) -> Vec<Primitive> {
    let sx = rng.gen_range(0.22..0.4);
    let sy = rng.gen_range(0.22..0.4);
    let th = rng.gen_range(0.03..0.06);
    let seat_z = rng.gen_range(-0.15..0.05);
    let leg = rng.gen_range(0.025..0.05);
    let back_h = rng.gen_range(0.2f64..0.45 - th).min(0.5 - seat_z - th);
    let (seat_color, leg_color) = (color(rng), color(rng));
    let back_color = if rng.gen_bool(0.5) { seat_color } else { color(rng) };
    let leg_half_h = (seat_z - th + 0.5) / 2.0;
    let mut prims = vec![
        cuboid([0.0, 0.0, seat_z], [sx, sy, th], seat_color),
        cuboid([0.0, sy - th, seat_z + th + back_h / 2.0], [sx, th, back_h / 2.0], back_color),
    ];
    for (x, y) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
        prims.push(cuboid([x * (sx - leg), y * (sy - leg), -0.5 + leg_half_h], [leg, leg, leg_half_h], leg_color));
    }
    prims
}

fn car<R: Rng>(rng: &mut R) -> Vec<Primitive> {
    let bx = rng.gen_range(0.3..0.46);
    let by = rng.gen_range(0.16..0.26);
    let bz = rng.gen_range(0.07..0.12);
    let wheel_r = rng.gen_range(0.07..0.11);
    let body_z = -0.5 + wheel_r + bz * 0.6;
    let cabin_kind = if rng.gen_bool(0.5) { PrimitiveKind::Box } else { PrimitiveKind::Ellipsoid };
    let cz = rng.gen_range(0.06..0.12);
    let body_color = color(rng);
    let wheel_color = color(rng);
    let mut prims = vec![
        cuboid([0.0, 0.0, body_z], [bx, by, bz], body_color),
        Primitive {
            kind: cabin_kind,
            center: [rng.gen_range(-0.08..0.08), 0.0, body_z + bz + cz * 0.7],
            half: [bx * rng.gen_range(0.45..0.65), by * 0.9, cz],
            color: if rng.gen_bool(0.5) { body_color } else { color(rng) },
        },
    ];
    for (x, y) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
        prims.push(Primitive {
            kind: PrimitiveKind::Ellipsoid,
            center: [x * (bx - wheel_r * 1.2), y * (by - 0.03), -0.5 + wheel_r],
            half: [wheel_r, 0.03, wheel_r],
            color: wheel_color,
        });
    }
    prims
}

/// Deterministic object of the given class for `seed`.
pub fn generate_toy_object(seed: u64, class: ObjectClass) -> ToyObject {
    let mut rng = seeding::rng_for(seed, 0x7059, class as u64);
    let primitives = match class {
        ObjectClass::ChairLike => chair(&mut rng),
        ObjectClass::CarLike => car(&mut rng),
    };
    ToyObject { id: format!("{}-{seed}", class.name()), class, primitives }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_object() {
        for class in [ObjectClass::ChairLike, ObjectClass::CarLike] {
            assert_eq!(generate_toy_object(3, class), generate_toy_object(3, class));
            assert_ne!(generate_toy_object(3, class).primitives[0].half, generate_toy_object(4, class).primitives[0].half);
        }
    }

    #[test]
    fn objects_fit_unit_cube() {
        for seed in 0..200 {
            for class in [ObjectClass::ChairLike, ObjectClass::CarLike] {
                generate_toy_object(seed, class).validate().unwrap();
            }
        }
    }

    #[test]
    fn slab_method_hand_computation() {
        // Box [0,1] x [0,2] x [-1,1]; ray from (-1, 0.5, 0) along (1, 1, 0)/sqrt2.
        // x slab: t in [sqrt2, 2 sqrt2]; y slab: t in [-0.5 sqrt2, 1.5 sqrt2]; z unbounded.
        let b = cuboid([0.5, 1.0, 0.0], [0.5, 1.0, 1.0], [0.0; 3]);
        let s = std::f64::consts::SQRT_2;
        let ray = Ray { origin: [-1.0, 0.5, 0.0], direction: [1.0 / s, 1.0 / s, 0.0] };
        assert!((b.intersect(&ray).unwrap() - s).abs() < 1e-12);
        let miss = Ray { origin: [-1.0, 3.0, 0.0], direction: [1.0, 0.0, 0.0] };
        assert_eq!(b.intersect(&miss), None);
    }

    #[test]
    fn ellipsoid_hit_depth() {
        let e = Primitive { kind: PrimitiveKind::Ellipsoid, center: [0.0; 3], half: [0.5, 0.25, 0.1], color: [0.0; 3] };
        let ray = Ray { origin: [0.0, -2.0, 0.0], direction: [0.0, 1.0, 0.0] };
        assert!((e.intersect(&ray).unwrap() - 1.75).abs() < 1e-12);
    }

    #[test]
    fn centered_box_fills_center_pixel() {
        let obj = ToyObject { id: "box".into(), class: ObjectClass::ChairLike, primitives: vec![cuboid([0.0; 3], [0.5; 3], [0.2, 0.4, 0.6])] };
        let cam = Camera::look_at([0.0, -2.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0], 8.0, 9, 9, 0.5, 4.0).unwrap();
        let img = reference_render(&obj, &cam).unwrap();
        assert_eq!(img.pixel(4, 4), [0.2, 0.4, 0.6]);
    }

    #[test]
    fn looking_away_is_white() {
        let obj = generate_toy_object(1, ObjectClass::CarLike);
        let cam = Camera::look_at([0.0, -2.0, 0.0], [0.0, -5.0, 0.0], [0.0, 0.0, 1.0], 8.0, 8, 8, 0.5, 4.0).unwrap();
        assert_eq!(reference_render(&obj, &cam).unwrap(), Image::filled(8, 8, [1.0; 3]));
    }
}
