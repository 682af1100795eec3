use std::cmp::Ordering;

use crate::diff::Mat;
use crate::error::{Error, Result};
use crate::geom::Vec3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// Uniform grid over a point set with cell size equal to the query radius,
/// stored in compressed rows: points of cell `c` are `items[starts[c]..starts[c + 1]]`.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    lo: Vec3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<u32>,
    items: Vec<u32>,
}

impl NeighborIndex {
    pub fn build(positions: &Mat, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::Argument(format!("neighbor radius must be positive, got {radius}")));
        }
        if positions.ncols() != 3 {
            return Err(Error::dim("neighbor index", "Mx3", format!("{:?}", positions.dim())));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for row in positions.rows() {
            for c in 0..3 {
                lo[c] = lo[c].min(row[c]);
                hi[c] = hi[c].max(row[c]);
            }
        }
        if positions.nrows() == 0 {
            lo = [0.0; 3];
            hi = [0.0; 3];
        }
        // Large extents relative to the radius grow the cells instead of the grid.
        let extent = (0..3).map(|c| hi[c] - lo[c]).fold(0.0, f64::max);
        let cell = radius.max(extent / 1024.0);
        let mut dims = [1usize; 3];
        for c in 0..3 {
            dims[c] = ((hi[c] - lo[c]) / cell).floor() as usize + 1;
        }
        let mut index = Self { lo, cell, dims, starts: Vec::new(), items: Vec::new() };
        let n_cells = dims[0] * dims[1] * dims[2];
        let cell_of: Vec<usize> = positions.rows().into_iter().map(|r| index.flat(index.cell_coords([r[0], r[1], r[2]]))).collect();
        let mut counts = vec![0u32; n_cells + 1];
        for &c in &cell_of {
            counts[c + 1] += 1;
        }
        for c in 0..n_cells {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut items = vec![0u32; cell_of.len()];
        for (i, &c) in cell_of.iter().enumerate() {
            items[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        index.starts = counts;
        index.items = items;
        Ok(index)
    }

    pub fn radius_capacity(&self) -> f64 {
        self.cell
    }

    fn cell_coords(&self, p: Vec3) -> [i64; 3] {
        let mut out = [0i64; 3];
        for c in 0..3 {
            out[c] = ((p[c] - self.lo[c]) / self.cell).floor() as i64;
        }
        out
    }

    fn flat(&self, c: [i64; 3]) -> usize {
        let x = c[0].clamp(0, self.dims[0] as i64 - 1) as usize;
        let y = c[1].clamp(0, self.dims[1] as i64 - 1) as usize;
        let z = c[2].clamp(0, self.dims[2] as i64 - 1) as usize;
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    /// Calls `visit` for every point in the cells around `q`: a superset of the
    /// points within the build radius of `q`.
    pub fn for_each_candidate(&self, q: Vec3, mut visit: impl FnMut(usize)) {
        let c = self.cell_coords(q);
        let mut range = [(0i64, 0i64); 3];
        for a in 0..3 {
            let lo = (c[a] - 1).max(0);
            let hi = (c[a] + 1).min(self.dims[a] as i64 - 1);
            if lo > hi {
                return;
            }
            range[a] = (lo, hi);
        }
        for x in range[0].0..=range[0].1 {
            for y in range[1].0..=range[1].1 {
                for z in range[2].0..=range[2].1 {
                    let f = (x as usize * self.dims[1] + y as usize) * self.dims[2] + z as usize;
                    for &i in &self.items[self.starts[f] as usize..self.starts[f + 1] as usize] {
                        visit(i as usize);
                    }
                }
            }
        }
    }

    /// The `k` nearest points within `radius` of `q`, nearest first, ties by index.
    /// `radius` must not exceed the radius the index was built with.
    pub fn query(&self, positions: &Mat, q: Vec3, k: usize, radius: f64) -> Vec<Neighbor> {
        let mut found = Vec::new();
        self.for_each_candidate(q, |i| {
            let d = ((q[0] - positions[[i, 0]]).powi(2) + (q[1] - positions[[i, 1]]).powi(2) + (q[2] - positions[[i, 2]]).powi(2)).sqrt();
            if d <= radius {
                found.push(Neighbor { index: i, distance: d });
            }
        });
        found.sort_by(by_distance_then_index);
        found.truncate(k);
        found
    }
}

pub(crate) fn by_distance_then_index(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index))
}

/// Median over all points of all clouds of the distance to the nearest other point.
pub fn median_nn_spacing(clouds: &[&Mat]) -> Result<f64> {
    let mut dists = Vec::new();
    for pos in clouds {
        let n = pos.nrows();
        for i in 0..n {
            let mut best = f64::INFINITY;
            for j in 0..n {
                if i != j {
                    let d: f64 = (0..3).map(|c| (pos[[i, c]] - pos[[j, c]]).powi(2)).sum();
                    best = best.min(d);
                }
            }
            if best.is_finite() {
                dists.push(best.sqrt());
            }
        }
    }
    if dists.is_empty() {
        return Err(Error::DegenerateData("nearest-neighbor spacing needs clouds with at least two points".into()));
    }
    dists.sort_by(f64::total_cmp);
    let n = dists.len();
    Ok(if n % 2 == 1 { dists[n / 2] } else { 0.5 * (dists[n / 2 - 1] + dists[n / 2]) })
}
