//! Point set distances, two-sample 1-NN accuracy, PSNR and pixel retrieval.

mod hungarian;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::Mat;
use crate::error::{Error, Result};
use crate::render::Image;

pub use hungarian::min_cost_assignment;

/// Largest set size the exact EMD accepts.
pub const EMD_EXACT_MAX: usize = 256;

/// Reported for identical images.
pub const PSNR_IDENTICAL: f64 = f64::INFINITY;

pub const CHAMFER_CONVENTION: &str = "chamfer: mean squared nearest-neighbor distance, summed over both directions";
pub const EMD_CONVENTION: &str = "emd: mean euclidean distance under the optimal bijection";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetDistance {
    Chamfer,
    Emd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub set_sizes: Vec<usize>,
    pub convention: String,
}

fn check_set(p: &Mat, what: &str) -> Result<()> {
    if p.nrows() == 0 {
        return Err(Error::Argument(format!("{what} is empty")));
    }
    if p.ncols() != 3 {
        return Err(Error::dim(what, "Mx3", format!("{:?}", p.dim())));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument(format!("{what} has non-finite coordinates")));
    }
    Ok(())
}

fn sq(a: &Mat, i: usize, b: &Mat, j: usize) -> f64 {
    (0..3).map(|c| (a[[i, c]] - b[[j, c]]).powi(2)).sum()
}

fn mean_nn_sq(a: &Mat, b: &Mat) -> f64 {
    let s: f64 = (0..a.nrows()).map(|i| (0..b.nrows()).map(|j| sq(a, i, b, j)).fold(f64::INFINITY, f64::min)).sum();
    s / a.nrows() as f64
}

/// Chamfer distance with squared distances, both directions averaged then added.
pub fn chamfer(a: &Mat, b: &Mat) -> Result<f64> {
    check_set(a, "first point set")?;
    check_set(b, "second point set")?;
    Ok(mean_nn_sq(a, b) + mean_nn_sq(b, a))
}

/// Exact earth mover's distance between equal-size sets: the mean Euclidean
/// distance under the optimal one-to-one matching.
pub fn emd(a: &Mat, b: &Mat) -> Result<f64> {
    check_set(a, "first point set")?;
    check_set(b, "second point set")?;
    let n = a.nrows();
    if b.nrows() != n {
        return Err(Error::Argument(format!("emd needs equal set sizes, got {} and {}", n, b.nrows())));
    }
    if n > EMD_EXACT_MAX {
        return Err(Error::Capability(format!("exact emd is limited to {EMD_EXACT_MAX} points, got {n}")));
    }
    let cost = Mat::from_shape_fn((n, n), |(i, j)| sq(a, i, b, j).sqrt());
    let assign = min_cost_assignment(&cost)?;
    Ok(assign.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>() / n as f64)
}

pub fn set_distance(a: &Mat, b: &Mat, which: SetDistance) -> Result<f64> {
    match which {
        SetDistance::Chamfer => chamfer(a, b),
        SetDistance::Emd => emd(a, b),
    }
}

/// Leave-one-out 1-nearest-neighbor classification accuracy over the union
/// of `generated` (first) and `reference`; ties go to the lowest union index.
pub fn one_nn_accuracy(generated: &[Mat], reference: &[Mat], which: SetDistance) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::Argument("1-NN accuracy needs non-empty generated and reference lists".into()));
    }
    let all: Vec<&Mat> = generated.iter().chain(reference).collect();
    let n = all.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let dists = pairs.par_iter().map(|&(i, j)| set_distance(all[i], all[j], which)).collect::<Result<Vec<f64>>>()?;
    let mut d = Mat::zeros((n, n));
    for (&(i, j), &v) in pairs.iter().zip(&dists) {
        d[[i, j]] = v;
        d[[j, i]] = v;
    }
    let is_gen = |i: usize| i < generated.len();
    let correct = (0..n)
        .filter(|&i| {
            let mut best = None::<(usize, f64)>;
            for j in (0..n).filter(|&j| j != i) {
                if best.map_or(true, |(_, bd)| d[[i, j]] < bd) {
                    best = Some((j, d[[i, j]]));
                }
            }
            best.map_or(false, |(j, _)| is_gen(j) == is_gen(i))
        })
        .count();
    Ok(correct as f64 / n as f64)
}

/// Peak signal-to-noise ratio for images in `[0, 1]`; [`PSNR_IDENTICAL`] when equal.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Argument(format!("psnr of {}x{} and {}x{} images", a.width, a.height, b.width, b.height)));
    }
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    Ok(if mse == 0.0 { PSNR_IDENTICAL } else { -10.0 * mse.log10() })
}

/// Corpus entry with the smallest pixel-space L2 distance to `query`; ties to the lowest index.
pub fn pixel_retrieval<'a>(query: &Image, corpus: &'a [(String, Image)]) -> Result<&'a str> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (id, img)) in corpus.iter().enumerate() {
        if img.width != query.width || img.height != query.height {
            return Err(Error::Argument(format!("corpus image {id} differs in size from the query")));
        }
        let d: f64 = img.data.iter().zip(&query.data).map(|(x, y)| (x - y) * (x - y)).sum();
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| corpus[i].0.as_str()).ok_or_else(|| Error::Argument("retrieval corpus is empty".into()))
}

pub fn report(metric: &str, value: f64, set_sizes: Vec<usize>, convention: &str) -> MetricReport {
    MetricReport { metric: metric.into(), value, set_sizes, convention: convention.into() }
}
