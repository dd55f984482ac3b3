//! Rounding of approximate sphere directions to exact sparse solutions.
//!
//! An approximate direction only makes `L q` *nearly* sparse. Sampling rows
//! among the smallest entries of `L q` and extracting the kernel of that row
//! submatrix recovers the exact direction whenever the sampled rows all
//! belong to the true zero pattern.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::RngCore;

/// Sampling-based rounding parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RoundingConfig {
    /// Candidate index pool size as a multiple of b: `r = round(r_factor * b)`.
    pub r_factor: f64,
    /// Kernel extraction attempts per approximate direction.
    pub samples_per_direction: usize,
    /// Relative singular-value threshold below which a direction counts as
    /// kernel.
    pub kernel_tol: f64,
}

impl Default for RoundingConfig {
    fn default() -> Self {
        Self {
            r_factor: 1.5,
            samples_per_direction: 1,
            kernel_tol: 1e-8,
        }
    }
}

impl RoundingConfig {
    /// Default pool factor for a given layer width: narrow layers sample
    /// from a 3b pool, everything else from 1.5b.
    pub fn for_width(width: usize) -> Self {
        Self {
            r_factor: if width == 200 { 3.0 } else { 1.5 },
            ..Self::default()
        }
    }
}

/// Unit spanning vector of `ker(rows)` if that kernel is exactly
/// one-dimensional, judged by singular values at or below
/// `tol * sigma_max`. Accepts any row count up to the column count.
pub fn kernel_direction(rows: &DMatrix<f64>, tol: f64) -> Option<DVector<f64>> {
    let b = rows.ncols();
    debug_assert!(rows.nrows() <= b);
    // Pad with zero rows so the SVD exposes the full right basis.
    let mut square = DMatrix::zeros(b, b);
    square.rows_mut(0, rows.nrows()).copy_from(rows);
    let svd = square.svd(false, true);
    let v_t = svd.v_t.as_ref().unwrap();

    let max_sv = svd.singular_values.max();
    let mut smallest = (f64::INFINITY, 0);
    let mut kernel_dim = 0;
    for (i, &sv) in svd.singular_values.iter().enumerate() {
        if sv <= tol * max_sv {
            kernel_dim += 1;
        }
        if sv < smallest.0 {
            smallest = (sv, i);
        }
    }
    if kernel_dim != 1 {
        return None;
    }
    let mut direction = v_t.row(smallest.1).transpose();
    direction /= direction.norm();
    Some(direction)
}

/// Rounds `q_hat` by sampling b of the r smallest-magnitude entries of
/// `L q_hat` and extracting the kernel of the corresponding rows of L.
/// Returns the kernel direction sign-aligned with `q_hat`, or `None` when
/// no sample produced a one-dimensional kernel.
pub fn round_via_sampling(
    l: &DMatrix<f64>,
    q_hat: &DVector<f64>,
    cfg: &RoundingConfig,
    rng: &mut dyn RngCore,
) -> Result<Option<DVector<f64>>> {
    let (m, b) = l.shape();
    let r = (cfg.r_factor * b as f64).round() as usize;
    if r < b {
        return Err(Error::Config(format!(
            "rounding pool r = {r} is smaller than the rank b = {b}"
        )));
    }
    if cfg.samples_per_direction == 0 {
        return Err(Error::Config("samples per direction must be >= 1".into()));
    }
    let r = r.min(m);

    let y = l * q_hat;
    let mut by_magnitude: Vec<usize> = (0..m).collect();
    by_magnitude.sort_by(|&a, &c| y[a].abs().total_cmp(&y[c].abs()).then(a.cmp(&c)));
    let pool = &by_magnitude[..r];

    for _ in 0..cfg.samples_per_direction {
        let chosen = sample_without_replacement(pool, b, rng);
        let mut rows = DMatrix::zeros(b, b);
        for (k, &idx) in chosen.iter().enumerate() {
            rows.row_mut(k).copy_from(&l.row(idx));
        }
        if let Some(mut direction) = kernel_direction(&rows, cfg.kernel_tol) {
            if direction.dot(q_hat) < 0.0 {
                direction = -direction;
            }
            return Ok(Some(direction));
        }
    }
    Ok(None)
}

fn sample_without_replacement(pool: &[usize], count: usize, rng: &mut dyn RngCore) -> Vec<usize> {
    use rand::Rng;
    let mut indices: Vec<usize> = pool.to_vec();
    let mut chosen = Vec::with_capacity(count);
    for _ in 0..count {
        let at = rng.gen_range(0..indices.len());
        chosen.push(indices.swap_remove(at));
    }
    chosen
}
