//! Initial low-rank decomposition of the observed weight gradient.
//!
//! The observed `dW` factors through the batch: an SVD yields an orthonormal
//! left factor `L` and a right factor `R` with `L R ~ dW` at the batch rank.
//! All downstream search happens in the `b`-dimensional coordinate space of
//! `L`'s columns.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Preconditioned factors of the weight gradient.
///
/// `left` has orthonormal columns (the leading left singular vectors, sign
/// fixed so each column's largest-magnitude entry is positive) and
/// `left * right` reconstructs the input within `residual` relative error.
#[derive(Debug, Clone)]
pub struct LowRankPair {
    pub left: DMatrix<f64>,
    pub right: DMatrix<f64>,
    pub rank: usize,
    pub singular_values: DVector<f64>,
    pub residual: f64,
}

/// Relative singular-value cutoff for rank detection on clean captures.
pub const CLEAN_RANK_TOL: f64 = 1e-9;

/// How the batch rank is read off the singular spectrum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankRule {
    /// Largest k with `sv[k-1] > tol * sv[0]`; right for noiseless captures.
    Clean(f64),
    /// Largest multiplicative gap in the upper half of the spectrum; right
    /// when a noise floor hides the cutoff.
    NoisyGap,
    Fixed(usize),
}

/// Factors `dW` through its SVD, truncated at `b_override` or at the
/// estimated batch rank.
pub fn initial_decomposition(
    weight_gradient: &DMatrix<f64>,
    b_override: Option<usize>,
) -> Result<LowRankPair> {
    let rule = match b_override {
        Some(b) => RankRule::Fixed(b),
        None => RankRule::Clean(CLEAN_RANK_TOL),
    };
    decompose_with_rule(weight_gradient, rule)
}

/// As [`initial_decomposition`] with an explicit rank rule.
pub fn decompose_with_rule(weight_gradient: &DMatrix<f64>, rule: RankRule) -> Result<LowRankPair> {
    let (m, n) = weight_gradient.shape();
    if m == 0 || n == 0 {
        return Err(Error::Shape("weight gradient must be non-empty".into()));
    }
    if weight_gradient.iter().any(|v| !v.is_finite()) {
        return Err(Error::Shape("weight gradient contains non-finite entries".into()));
    }
    // `svd` (unlike `try_svd` with hand-picked tolerances) guarantees a
    // consistent, descending-ordered factorization.
    let svd = weight_gradient.clone().svd(true, true);
    let singular_values = svd.singular_values.clone();
    debug_assert!(singular_values
        .as_slice()
        .windows(2)
        .all(|w| w[0] >= w[1]));

    let rank = match rule {
        RankRule::Fixed(b) => {
            if b == 0 || b > m.min(n) {
                return Err(Error::Rank(format!(
                    "requested rank {b} outside 1..={}",
                    m.min(n)
                )));
            }
            b
        }
        RankRule::Clean(tol) => estimate_batch_rank(&singular_values, tol),
        RankRule::NoisyGap => estimate_batch_rank_noisy(&singular_values),
    };
    if rank == 0 {
        return Err(Error::Rank("weight gradient is numerically zero".into()));
    }

    let u = svd.u.as_ref().unwrap();
    let v_t = svd.v_t.as_ref().unwrap();
    let mut left = DMatrix::zeros(m, rank);
    let mut right = DMatrix::zeros(rank, n);
    for (k, &src) in order.iter().take(rank).enumerate() {
        let mut col = u.column(src).clone_owned();
        // Sign convention: largest-magnitude entry positive, compensated in
        // the right factor, so decompositions are backend-reproducible.
        let extreme = col.iter().cloned().fold(0.0_f64, |acc, v| {
            if v.abs() > acc.abs() {
                v
            } else {
                acc
            }
        });
        let flip = if extreme < 0.0 { -1.0 } else { 1.0 };
        col *= flip;
        left.set_column(k, &col);
        right.set_row(k, &(v_t.row(src) * (flip * singular_values[k])));
    }

    let denom = weight_gradient.norm().max(f64::MIN_POSITIVE);
    let residual = (&left * &right - weight_gradient).norm() / denom;
    Ok(LowRankPair {
        left,
        right,
        rank,
        singular_values,
        residual,
    })
}

/// Largest `k` with `sv[k-1] > tol_rel * sv[0]`; zero for an all-zero
/// spectrum. `sv` must be sorted descending.
pub fn estimate_batch_rank(singular_values: &DVector<f64>, tol_rel: f64) -> usize {
    let top = singular_values.get(0).copied().unwrap_or(0.0);
    if top <= 0.0 {
        return 0;
    }
    singular_values.iter().take_while(|&&s| s > tol_rel * top).count()
}

/// Rank rule for noisy spectra: the split point `k` in `[1, len/2]` with the
/// largest ratio `sv[k-1] / sv[k]`. Used for DP captures where the clean
/// cutoff would absorb the noise floor.
pub fn estimate_batch_rank_noisy(singular_values: &DVector<f64>) -> usize {
    let len = singular_values.len();
    if len < 2 || singular_values[0] <= 0.0 {
        return estimate_batch_rank(singular_values, CLEAN_RANK_TOL);
    }
    let upper = (len / 2).max(1);
    let mut best_k = 1;
    let mut best_gap = f64::NEG_INFINITY;
    for k in 1..=upper.min(len - 1) {
        let hi = singular_values[k - 1];
        let lo = singular_values[k].max(f64::MIN_POSITIVE);
        let gap = (hi / lo).ln();
        if gap > best_gap {
            best_gap = gap;
            best_k = k;
        }
    }
    best_k
}
