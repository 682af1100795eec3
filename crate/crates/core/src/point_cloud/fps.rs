use crate::diff::Mat;
use crate::error::{Error, Result};

fn sq_dist(points: &Mat, a: usize, b: usize) -> f64 {
    (0..3).map(|c| (points[[a, c]] - points[[b, c]]).powi(2)).sum()
}

/// Greedy farthest point sampling of `k` rows of an `N x 3` matrix.
///
/// Each pick maximizes the distance to the set chosen so far; ties go to the
/// lowest index.
pub fn farthest_point_sample(points: &Mat, k: usize, start_index: usize) -> Result<Vec<usize>> {
    let n = points.nrows();
    if points.ncols() != 3 {
        return Err(Error::dim("farthest_point_sample", "Nx3", format!("{}x{}", n, points.ncols())));
    }
    if k == 0 || k > n {
        return Err(Error::Argument(format!("cannot sample {k} of {n} points")));
    }
    if start_index >= n {
        return Err(Error::Argument(format!("start index {start_index} out of range for {n} points")));
    }
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = start_index;
    loop {
        chosen.push(current);
        taken[current] = true;
        if chosen.len() == k {
            break;
        }
        let mut best = None::<(usize, f64)>;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = sq_dist(points, i, current);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if best.map_or(true, |(_, bd)| min_d[i] > bd) {
                best = Some((i, min_d[i]));
            }
        }
        current = best.expect("k <= n leaves a candidate").0;
    }
    Ok(chosen)
}
