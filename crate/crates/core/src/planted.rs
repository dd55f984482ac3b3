//! Synthetic problems with known sparse structure.
//!
//! Builds an activation-gradient-like sparse matrix, mixes it with a dense
//! full-rank right factor, and records the unit directions the sphere search
//! is supposed to recover. Used by the validation suites as an independent
//! oracle.

use crate::decomp::{initial_decomposition, LowRankPair};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A mixed sparse factorization with its ground truth.
#[derive(Debug, Clone)]
pub struct PlantedProblem {
    /// Sparse coefficient matrix (m x b), i.i.d. Bernoulli(1/2) x Gaussian.
    pub coefficients: DMatrix<f64>,
    /// Dense right factor (n x b) used to mix the coefficients.
    pub mixing: DMatrix<f64>,
    /// Decomposition of `coefficients * mixing^T`.
    pub pair: LowRankPair,
    /// Unit directions q_i with `pair.left * q_i` proportional to the i-th
    /// coefficient column.
    pub true_directions: Vec<DVector<f64>>,
}

/// Generates a planted instance of shape (m, b) mixed through dimension n.
pub fn planted_problem(m: usize, b: usize, n: usize, seed: u64) -> PlantedProblem {
    planted_problem_with_density(m, b, n, 0.5, seed)
}

/// As `planted_problem` with an explicit nonzero density for the sparse
/// factor.
pub fn planted_problem_with_density(
    m: usize,
    b: usize,
    n: usize,
    density: f64,
    seed: u64,
) -> PlantedProblem {
    assert!(b <= m.min(n), "planted rank must satisfy b <= min(m, n)");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coefficients = loop {
        let g = DMatrix::from_fn(m, b, |_, _| {
            if rng.gen_bool(density) {
                rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            }
        });
        // Regenerate in the (vanishingly unlikely) case of a zero column.
        if (0..b).all(|j| g.column(j).norm() > 0.0) {
            break g;
        }
    };
    let mixing = DMatrix::from_fn(n, b, |_, _| rng.sample::<f64, _>(StandardNormal));
    let observed = &coefficients * mixing.transpose();
    let pair = initial_decomposition(&observed, Some(b)).expect("planted instance is rank b");

    // The left factor spans the coefficient columns, so their coordinates are
    // exactly the projections.
    let coords = pair.left.transpose() * &coefficients;
    let true_directions = (0..b)
        .map(|j| {
            let col = coords.column(j).clone_owned();
            &col / col.norm()
        })
        .collect();

    PlantedProblem {
        coefficients,
        mixing,
        pair,
        true_directions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_directions_reproduce_sparse_columns() {
        let problem = planted_problem(80, 6, 50, 3);
        assert_eq!(problem.pair.rank, 6);
        for (j, q) in problem.true_directions.iter().enumerate() {
            assert!((q.norm() - 1.0).abs() < 1e-12);
            let image = &problem.pair.left * q;
            let col = problem.coefficients.column(j);
            let scaled = &image * col.norm();
            let gap = (&scaled - col).norm().min((&scaled + col).norm());
            assert!(gap < 1e-9, "column {j}: gap {gap}");
        }
    }

    #[test]
    fn density_controls_zero_fraction() {
        let problem = planted_problem_with_density(200, 4, 64, 0.25, 9);
        let zeros = problem.coefficients.iter().filter(|v| **v == 0.0).count();
        let frac = zeros as f64 / 800.0;
        assert!((0.65..0.85).contains(&frac), "zero fraction {frac}");
    }
}
