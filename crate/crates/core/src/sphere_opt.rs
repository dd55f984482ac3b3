//! First-order search for sparsity-inducing directions on the unit sphere.
//!
//! Minimizes a surrogate sparsity loss `phi(L q)` over `q` on the sphere with
//! either Riemannian Adam (tangent-space moments, renormalization retraction)
//! or projected subgradient descent, across many independently seeded
//! restarts.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

/// Convex-ish surrogates of the l0 count applied to `L q`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SurrogateLoss {
    /// `sum |y_i|`; sharp minima coincide with the exact sparse directions.
    L1,
    /// `sum mu * log(cosh(y_i / mu))`, a smooth stand-in for L1.
    LogCosh { mu: f64 },
    /// `-sum y_i^4`, maximizing spikiness instead of minimizing mass.
    NegL4,
}

impl SurrogateLoss {
    /// Default LogCosh smoothing for a given layer width.
    pub fn default_mu(width: usize) -> f64 {
        if width == 200 {
            300.0
        } else {
            500.0
        }
    }

    pub fn value(&self, y: &DVector<f64>) -> f64 {
        match self {
            SurrogateLoss::L1 => y.iter().map(|v| v.abs()).sum(),
            SurrogateLoss::LogCosh { mu } => y.iter().map(|v| mu * ln_cosh(v / mu)).sum(),
            SurrogateLoss::NegL4 => -y.iter().map(|v| v.powi(4)).sum::<f64>(),
        }
    }

    /// Writes a subgradient of the loss at `y` into `out`.
    /// L1 uses 0 at kinks so exact solutions are fixed points.
    pub fn subgradient_into(&self, y: &DVector<f64>, out: &mut DVector<f64>) {
        match self {
            SurrogateLoss::L1 => {
                out.zip_apply(y, |g, v| *g = if v == 0.0 { 0.0 } else { v.signum() })
            }
            SurrogateLoss::LogCosh { mu } => out.zip_apply(y, |g, v| *g = (v / mu).tanh()),
            SurrogateLoss::NegL4 => out.zip_apply(y, |g, v| *g = -4.0 * v.powi(3)),
        }
    }

    pub fn value_and_subgradient(&self, y: &DVector<f64>) -> (f64, DVector<f64>) {
        let mut grad = DVector::zeros(y.len());
        self.subgradient_into(y, &mut grad);
        (self.value(y), grad)
    }
}

/// Overflow-safe `ln(cosh(t))`.
fn ln_cosh(t: f64) -> f64 {
    let a = t.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    RiemannianAdam,
    ProjectedGradient,
}

/// Sphere-optimizer settings shared by every restart.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimizerConfig {
    pub method: Method,
    pub steps: usize,
    /// Learning-rate breakpoints `(step, rate)`; the rate of the last
    /// breakpoint at or before the current step applies.
    pub schedule: Vec<(usize, f64)>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Number of independent restarts.
    pub restarts: usize,
    pub master_seed: u64,
}

impl OptimizerConfig {
    /// Riemannian Adam, 500 steps, rate 1e-1 dropped to 1e-3 and 1e-5 at
    /// steps 200 and 400.
    pub fn riemannian_adam_default() -> Self {
        Self {
            method: Method::RiemannianAdam,
            steps: 500,
            schedule: vec![(0, 1e-1), (200, 1e-3), (400, 1e-5)],
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            restarts: 1,
            master_seed: 0,
        }
    }

    /// Projected subgradient descent at the same breakpoints, rates 1e-2,
    /// 1e-4, 1e-6.
    pub fn pgd_default() -> Self {
        Self {
            method: Method::ProjectedGradient,
            schedule: vec![(0, 1e-2), (200, 1e-4), (400, 1e-6)],
            ..Self::riemannian_adam_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::Config("schedule needs at least one breakpoint".into()));
        }
        for pair in self.schedule.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::Config(
                    "schedule breakpoints must be strictly increasing".into(),
                ));
            }
        }
        if self.schedule.iter().any(|&(_, rate)| rate <= 0.0) {
            return Err(Error::Config("schedule rates must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("optimizer needs at least one step".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restart count must be >= 1".into()));
        }
        Ok(())
    }

    fn rate_at(&self, step: usize) -> f64 {
        let mut rate = self.schedule[0].1;
        for &(breakpoint, r) in &self.schedule {
            if breakpoint <= step {
                rate = r;
            } else {
                break;
            }
        }
        rate
    }
}

/// Uniform draw from the unit sphere.
pub fn random_unit_direction(dim: usize, rng: &mut impl Rng) -> DVector<f64> {
    assert!(dim >= 1);
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 1e-8 {
            return v / norm;
        }
    }
}

/// Runs the configured optimizer from `init`, returning the final iterate or
/// `None` if the trajectory left the finite range. Every iterate stays on the
/// sphere via renormalization.
pub fn optimize_on_sphere(
    l: &DMatrix<f64>,
    loss: &SurrogateLoss,
    init: &DVector<f64>,
    cfg: &OptimizerConfig,
) -> Option<DVector<f64>> {
    let (m, b) = l.shape();
    debug_assert_eq!(init.len(), b);
    debug_assert!((init.norm() - 1.0).abs() < 1e-9);

    let mut q = init.clone();
    let mut y = DVector::zeros(m);
    let mut phi_grad = DVector::zeros(m);
    let mut grad = DVector::zeros(b);
    let mut moment1 = DVector::zeros(b);
    let mut moment2 = DVector::zeros(b);
    let mut step_dir = DVector::zeros(b);

    for step in 0..cfg.steps {
        let rate = cfg.rate_at(step);
        y.gemv(1.0, l, &q, 0.0);
        loss.subgradient_into(&y, &mut phi_grad);
        grad.gemv_tr(1.0, l, &phi_grad, 0.0);

        match cfg.method {
            Method::ProjectedGradient => {
                q.axpy(-rate, &grad, 1.0);
            }
            Method::RiemannianAdam => {
                // Riemannian gradient: project onto the tangent space at q.
                let radial = q.dot(&grad);
                grad.axpy(-radial, &q, 1.0);

                moment1.axpy(1.0 - cfg.beta1, &grad, cfg.beta1);
                moment2.zip_apply(&grad, |v, g| *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g);
                let bias1 = 1.0 - cfg.beta1.powi(step as i32 + 1);
                let bias2 = 1.0 - cfg.beta2.powi(step as i32 + 1);

                step_dir.zip_zip_apply(&moment1, &moment2, |u, m1: f64, m2: f64| {
                    *u = -rate * (m1 / bias1) / ((m2 / bias2).sqrt() + cfg.epsilon)
                });
                let radial = q.dot(&step_dir);
                step_dir.axpy(-radial, &q, 1.0);
                q += &step_dir;
            }
        }

        let norm = q.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return None;
        }
        q /= norm;

        if cfg.method == Method::RiemannianAdam {
            // Transport the first moment by projecting onto the new tangent
            // space; the second moment is a per-coordinate accumulator and
            // stays in ambient coordinates.
            let radial = q.dot(&moment1);
            moment1.axpy(-radial, &q, 1.0);
        }
    }
    q.iter().all(|v| v.is_finite()).then_some(q)
}

/// Consumer of converged restart directions.
///
/// `submit` returns `true` when the consumer is satisfied and remaining
/// restarts may be skipped. Implementations must tolerate concurrent calls;
/// the RNG handed in continues the restart's private stream (rounding draws
/// from it).
pub trait CandidateSink: Sync {
    fn submit(&self, restart: usize, direction: DVector<f64>, rng: &mut dyn RngCore) -> bool;
}

/// Outcome counters for a restart sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RestartStats {
    pub requested: usize,
    pub executed: usize,
    pub failed: usize,
    pub stopped_early: bool,
}

/// Seed for restart `index` derived from the master seed (splitmix64), so
/// every restart is reproducible independently of scheduling.
pub fn derive_restart_seed(master_seed: u64, index: u64) -> u64 {
    let mut z = master_seed
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Executes `cfg.restarts` independent restarts (in parallel under the
/// ambient rayon pool) and forwards each converged direction to `sink`.
pub fn run_restarts(
    l: &DMatrix<f64>,
    loss: &SurrogateLoss,
    cfg: &OptimizerConfig,
    sink: &(impl CandidateSink + ?Sized),
) -> RestartStats {
    let b = l.ncols();
    let stop = AtomicBool::new(false);
    let executed = AtomicUsize::new(0);
    let failed = AtomicUsize::new(0);

    (0..cfg.restarts).into_par_iter().for_each(|index| {
        if stop.load(Ordering::Relaxed) {
            return;
        }
        executed.fetch_add(1, Ordering::Relaxed);
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_restart_seed(cfg.master_seed, index as u64));
        let init = random_unit_direction(b, &mut rng);
        match optimize_on_sphere(l, loss, &init, cfg) {
            Some(direction) => {
                if sink.submit(index, direction, &mut rng) {
                    stop.store(true, Ordering::Relaxed);
                }
            }
            None => {
                failed.fetch_add(1, Ordering::Relaxed);
            }
        }
    });

    RestartStats {
        requested: cfg.restarts,
        executed: executed.load(Ordering::Relaxed),
        failed: failed.load(Ordering::Relaxed),
        stopped_early: stop.load(Ordering::Relaxed),
    }
}
