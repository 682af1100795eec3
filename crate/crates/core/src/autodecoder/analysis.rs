use super::{Autodecoder, AutodecoderConfig, ObjectRecord};
use crate::diff::Mat;
use crate::error::{Error, Result};
use crate::render::{DecoderParams, RenderConfig};
use crate::seeding;

const SEED_TAG: u64 = 0x5345;

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityReport {
    /// Mean over objects of the per-point mean pairwise cosine similarity.
    pub mean: f64,
    pub per_object: Vec<f64>,
    pub n_seeds: usize,
}

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => a.dot(&b) / (na * nb),
    }
}

/// Per row, the mean cosine similarity over all pairs of `runs`. Two zero
/// vectors count as identical, a zero and a non-zero vector as orthogonal.
pub fn mean_pairwise_cosine(runs: &[&Mat]) -> Result<Vec<f64>> {
    if runs.len() < 2 {
        return Err(Error::Argument(format!("need at least 2 runs, got {}", runs.len())));
    }
    let dim = runs[0].dim();
    if runs.iter().any(|r| r.dim() != dim) {
        return Err(Error::dim("pairwise cosine", format!("{dim:?}"), "differing shapes"));
    }
    let pairs = (runs.len() * (runs.len() - 1) / 2) as f64;
    Ok((0..dim.0)
        .map(|i| {
            let mut s = 0.0;
            for a in 0..runs.len() {
                for b in a + 1..runs.len() {
                    s += cosine(runs[a].row(i), runs[b].row(i));
                }
            }
            s / pairs
        })
        .collect())
}

/// Re-fits every object's features from scratch under `n_seeds` seeds against
/// a frozen decoder and measures how consistently each point's feature is recovered.
pub fn cosine_similarity_analysis(
    records: &[ObjectRecord],
    config: &AutodecoderConfig,
    n_seeds: usize,
    decoder: &DecoderParams,
    render: &RenderConfig,
) -> Result<SimilarityReport> {
    if n_seeds < 2 {
        return Err(Error::Argument(format!("cosine similarity needs at least 2 seeds, got {n_seeds}")));
    }
    let mut runs: Vec<Vec<Mat>> = Vec::with_capacity(n_seeds);
    for s in 0..n_seeds {
        let cfg = AutodecoderConfig { seed: seeding::mix(config.seed, SEED_TAG, s as u64), ..config.clone() };
        let mut ad = Autodecoder::with_frozen_decoder(records, cfg, decoder.clone(), render.clone())?;
        ad.train(records)?;
        runs.push((0..records.len()).map(|j| ad.features(j).cloned()).collect::<Result<_>>()?);
    }
    let per_object: Vec<f64> = (0..records.len())
        .map(|j| {
            let sims = mean_pairwise_cosine(&runs.iter().map(|r| &r[j]).collect::<Vec<_>>())?;
            Ok(sims.iter().sum::<f64>() / sims.len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(SimilarityReport { mean: per_object.iter().sum::<f64>() / per_object.len() as f64, per_object, n_seeds })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_runs_are_one() {
        let a = Mat::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let s = mean_pairwise_cosine(&[&a, &a, &a]).unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn orthogonal_runs_are_zero() {
        let a = Mat::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        let b = Mat::from_shape_vec((1, 2), vec![0.0, 3.0]).unwrap();
        assert_eq!(mean_pairwise_cosine(&[&a, &b]).unwrap(), vec![0.0]);
    }

    #[test]
    fn zero_vectors() {
        let z = Mat::zeros((1, 2));
        let a = Mat::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        assert_eq!(mean_pairwise_cosine(&[&z, &z]).unwrap(), vec![1.0]);
        assert_eq!(mean_pairwise_cosine(&[&z, &a]).unwrap(), vec![0.0]);
    }

    #[test]
    fn one_seed_rejected() {
        let a = Mat::zeros((1, 2));
        assert!(matches!(mean_pairwise_cosine(&[&a]), Err(Error::Argument(_))));
    }
}
