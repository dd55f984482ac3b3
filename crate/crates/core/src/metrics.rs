//! Reconstruction quality metrics.

use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// PSNR where zero error saturates instead of dividing by zero.
pub const PSNR_CAP_DB: f64 = 200.0;

/// Peak signal-to-noise ratio in dB: `10 log10(peak^2 / MSE)`, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(truth: &[f64], reconstruction: &[f64], peak: f64) -> Result<f64> {
    if truth.len() != reconstruction.len() {
        return Err(Error::Shape(format!(
            "psnr operands differ in length: {} vs {}",
            truth.len(),
            reconstruction.len()
        )));
    }
    assert!(peak > 0.0, "psnr peak must be positive");
    let mse = truth
        .iter()
        .zip(reconstruction)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / truth.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Matches reconstruction columns to truth columns (greedy, lowest pairwise
/// MSE first, each column used once) and returns the per-truth-column PSNR.
/// Column order of the reconstruction is irrelevant by construction.
pub fn match_and_score(
    truth: &DMatrix<f64>,
    reconstruction: &DMatrix<f64>,
    peak: f64,
) -> Result<Vec<f64>> {
    if truth.shape() != reconstruction.shape() {
        return Err(Error::Shape(format!(
            "truth is {:?} but reconstruction is {:?}",
            truth.shape(),
            reconstruction.shape()
        )));
    }
    let b = truth.ncols();
    let mut pairs = Vec::with_capacity(b * b);
    for i in 0..b {
        for j in 0..b {
            let mse = (truth.column(i) - reconstruction.column(j)).norm_squared()
                / truth.nrows() as f64;
            pairs.push((mse, i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut truth_used = vec![false; b];
    let mut recon_used = vec![false; b];
    let mut scores = vec![0.0; b];
    let mut assigned = 0;
    for (mse, i, j) in pairs {
        if truth_used[i] || recon_used[j] {
            continue;
        }
        truth_used[i] = true;
        recon_used[j] = true;
        scores[i] = if mse == 0.0 {
            PSNR_CAP_DB
        } else {
            (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
        };
        assigned += 1;
        if assigned == b {
            break;
        }
    }
    Ok(scores)
}

/// Mean of the matched per-column PSNRs.
pub fn average_psnr(scores: &[f64]) -> f64 {
    scores.iter().sum::<f64>() / scores.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_closed_forms() {
        let x = vec![0.5, 0.25, 0.75];
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), 200.0);

        // MSE 1e-9 at peak 1 is exactly 90 dB.
        let shifted: Vec<f64> = x.iter().map(|v| v + 1e-9_f64.sqrt()).collect();
        assert!((psnr(&x, &shifted, 1.0).unwrap() - 90.0).abs() < 1e-9);

        let off: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&x, &off, 1.0).unwrap() - 20.0).abs() < 1e-9);

        assert!(psnr(&x, &x[..2].to_vec(), 1.0).is_err());
    }

    #[test]
    fn matching_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth = DMatrix::from_fn(12, 5, |_, _| rng.gen_range(0.0..1.0));
        let mut reversed = truth.clone();
        for j in 0..5 {
            reversed.set_column(j, &truth.column(4 - j));
        }
        let direct = match_and_score(&truth, &truth, 1.0).unwrap();
        let permuted = match_and_score(&truth, &reversed, 1.0).unwrap();
        assert_eq!(direct, permuted);
        assert!(direct.iter().all(|&s| s == 200.0));
    }

    #[test]
    fn single_corrupted_column_scores_low_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let truth = DMatrix::from_fn(12, 5, |_, _| rng.gen_range(0.0..1.0));
        let mut damaged = truth.clone();
        for i in 0..12 {
            damaged[(i, 2)] = rng.gen_range(0.0..1.0);
        }
        let scores = match_and_score(&truth, &damaged, 1.0).unwrap();
        let low = scores.iter().filter(|&&s| s < 100.0).count();
        assert_eq!(low, 1, "{scores:?}");
    }

    #[test]
    fn random_reconstruction_scores_poorly() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let truth = DMatrix::from_fn(256, 8, |_, _| rng.gen_range(0.0..1.0));
        let noise = DMatrix::from_fn(256, 8, |_, _| rng.gen_range(0.0..1.0));
        let scores = match_and_score(&truth, &noise, 1.0).unwrap();
        assert!(average_psnr(&scores) < 15.0);
    }
}
