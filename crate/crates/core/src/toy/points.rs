use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::object::{Primitive, PrimitiveKind, ToyObject};
use crate::diff::Mat;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::point_cloud::farthest_point_sample;
use crate::seeding;

/// Surface area; Knud Thomsen's approximation for ellipsoids.
pub fn surface_area(p: &Primitive) -> f64 {
    let [a, b, c] = p.half;
    match p.kind {
        PrimitiveKind::Box => 8.0 * (a * b + b * c + a * c),
        PrimitiveKind::Ellipsoid => {
            let e = 1.6075;
            let m = ((a * b).powf(e) + (a * c).powf(e) + (b * c).powf(e)) / 3.0;
            4.0 * std::f64::consts::PI * m.powf(1.0 / e)
        }
    }
}

fn pick<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn sample_box<R: Rng>(p: &Primitive, rng: &mut R) -> Vec3 {
    let [a, b, c] = p.half;
    // Face pairs normal to x, y, z.
    let axis = pick(&[b * c, a * c, a * b], rng);
    let mut local: Vec3 = std::array::from_fn(|k| rng.gen_range(-p.half[k]..p.half[k]));
    local[axis] = if rng.gen_bool(0.5) { p.half[axis] } else { -p.half[axis] };
    std::array::from_fn(|k| p.center[k] + local[k])
}

fn sample_ellipsoid<R: Rng>(p: &Primitive, rng: &mut R) -> Vec3 {
    let [a, b, c] = p.half;
    let max_scale = (b * c).max(a * c).max(a * b);
    loop {
        let g: Vec3 = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if n == 0.0 {
            continue;
        }
        let u: Vec3 = std::array::from_fn(|k| g[k] / n);
        // Area element of the sphere-to-ellipsoid map at u.
        let scale = ((b * c * u[0]).powi(2) + (a * c * u[1]).powi(2) + (a * b * u[2]).powi(2)).sqrt();
        if rng.gen::<f64>() * max_scale <= scale {
            return std::array::from_fn(|k| p.center[k] + p.half[k] * u[k]);
        }
    }
}

/// Area-weighted uniform samples on the surface of `obj`, skipping points
/// strictly inside another primitive.
pub fn sample_surface(obj: &ToyObject, n: usize, seed: u64) -> Result<Mat> {
    obj.validate()?;
    let mut rng = seeding::rng_for(seed, 0x5355, 0);
    let areas: Vec<f64> = obj.primitives.iter().map(surface_area).collect();
    let mut out = Mat::zeros((n, 3));
    let mut filled = 0;
    let mut attempts = 0usize;
    while filled < n {
        attempts += 1;
        if attempts > 1000 * n + 10_000 {
            return Err(Error::DegenerateGeometry(format!("object {} has almost no exposed surface", obj.id)));
        }
        let i = pick(&areas, &mut rng);
        let p = &obj.primitives[i];
        let x = match p.kind {
            PrimitiveKind::Box => sample_box(p, &mut rng),
            PrimitiveKind::Ellipsoid => sample_ellipsoid(p, &mut rng),
        };
        let buried = obj.primitives.iter().enumerate().any(|(j, q)| j != i && q.surface_residual(x) < -1e-9);
        if buried {
            continue;
        }
        out.row_mut(filled).assign(&ndarray::ArrayView1::from(&x));
        filled += 1;
    }
    Ok(out)
}

/// Dense surface sampling followed by farthest point sampling down to `m`.
pub fn extract_points(obj: &ToyObject, n_dense: usize, m: usize, seed: u64) -> Result<Mat> {
    if m == 0 || m > n_dense {
        return Err(Error::Argument(format!("need 1 <= m <= n_dense, got m={m}, n_dense={n_dense}")));
    }
    let dense = sample_surface(obj, n_dense, seed)?;
    let idx = farthest_point_sample(&dense, m, 0)?;
    Ok(dense.select(ndarray::Axis(0), &idx))
}
