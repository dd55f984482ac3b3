//! End-to-end attack driver: decomposition, restart loop, filtering,
//! reconstruction and reporting.

use super::{
    greedy_filt, init_filt, ortho_complement, AttackTolerances, CandidatePool, GreedyOutcome,
    SparsityScore, ZeroTolerance,
};
use crate::decomp::{decompose_with_rule, LowRankPair, RankRule};
use crate::error::{Error, Result};
use crate::fl_sim::GradientCapture;
use crate::metrics;
use crate::rounding::{round_via_sampling, RoundingConfig};
use crate::sphere_opt::{run_restarts, CandidateSink, OptimizerConfig, SurrogateLoss};
use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

/// Whether approximate directions are rounded before entering the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundingMode {
    /// Round for smooth losses, pass through for L1 (whose minima are exact).
    Auto,
    Always,
    Never,
}

/// Full attack configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackConfig {
    pub loss: SurrogateLoss,
    pub optimizer: OptimizerConfig,
    /// Acceptance threshold: a direction needs `>= tau * m` zero entries.
    pub tau: f64,
    /// Sign-agnostic duplicate threshold on `|<q, q'>|`.
    pub dedup_tol: f64,
    /// Relative zero tolerance for the score's zero test; a perfect score
    /// under this tolerance certifies an exactness-level reconstruction.
    pub zero_tol_rel: f64,
    /// Looser relative tolerance for candidate acceptance, matched to the
    /// optimizer's terminal accuracy.
    pub acceptance_tol_rel: f64,
    pub rounding: RoundingMode,
    pub rounding_cfg: RoundingConfig,
    /// Forces the batch rank instead of estimating it from the spectrum.
    pub b_override: Option<usize>,
    /// Stop the restart loop as soon as a perfect score is found.
    pub early_termination: bool,
    /// Dedicated rayon pool size; 0 uses the ambient pool.
    pub threads: usize,
    /// Peak value for PSNR computation against sealed ground truth.
    pub psnr_peak: f64,
}

impl AttackConfig {
    pub fn new(loss: SurrogateLoss, optimizer: OptimizerConfig) -> Self {
        Self {
            loss,
            optimizer,
            tau: 0.35,
            dedup_tol: 1e-6,
            zero_tol_rel: 1e-6,
            acceptance_tol_rel: 1e-5,
            rounding: RoundingMode::Auto,
            rounding_cfg: RoundingConfig::default(),
            b_override: None,
            early_termination: true,
            threads: 0,
            psnr_peak: 1.0,
        }
    }

    fn rounding_enabled(&self) -> bool {
        match self.rounding {
            RoundingMode::Auto => !matches!(self.loss, SurrogateLoss::L1),
            RoundingMode::Always => true,
            RoundingMode::Never => false,
        }
    }
}

/// Origin of a final disaggregation column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnSource {
    /// Candidate found by this restart index.
    Restart(usize),
    /// Filled from the orthogonal complement (partial reconstruction).
    Complement,
}

/// Restart-loop statistics for the report.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RestartReport {
    pub requested: usize,
    pub executed: usize,
    pub failed: usize,
    /// Submissions that passed the sparsity acceptance test.
    pub passed_sparsity: usize,
    /// Rounding attempts that produced no kernel direction.
    pub rounding_misses: usize,
    pub pool_size: usize,
    pub pool_rank: usize,
    pub early_terminated: bool,
}

/// Machine-readable attack outcome (the reconstruction itself is returned
/// separately and dumped by the harness on request).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReconstructionReport {
    pub lambda: f64,
    pub score: SparsityScore,
    pub batch_rank: usize,
    pub width: usize,
    pub input_dim: usize,
    pub protocol: crate::fl_sim::Protocol,
    pub restarts: RestartReport,
    pub column_sources: Vec<ColumnSource>,
    /// Columns whose bias-gradient scale was numerically zero.
    pub degenerate_columns: Vec<usize>,
    pub psnr_per_column: Option<Vec<f64>>,
    pub psnr_average: Option<f64>,
    pub wall_clock_secs: f64,
    pub config: AttackConfig,
}

/// Report plus the reconstructed batch (one column per datum).
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub report: ReconstructionReport,
    pub reconstruction: DMatrix<f64>,
}

struct SinkState {
    pool: CandidatePool,
    passed_sparsity: usize,
    success: Option<(GreedyOutcome, Vec<ColumnSource>)>,
}

struct AttackSink<'a> {
    pair: &'a LowRankPair,
    capture: &'a GradientCapture,
    cfg: &'a AttackConfig,
    tol: AttackTolerances,
    rounding: Option<RoundingConfig>,
    rounding_misses: AtomicUsize,
    state: Mutex<SinkState>,
    /// Present when early termination is disabled: submissions are buffered
    /// and replayed in restart order, so results cannot depend on thread
    /// scheduling.
    deferred: Option<Mutex<Vec<(usize, DVector<f64>)>>>,
}

impl AttackSink<'_> {
    fn add_to_pool(&self, state: &mut SinkState, restart: usize, direction: DVector<f64>) -> bool {
        let outcome = state.pool.submit_candidate(
            &self.pair.left,
            direction,
            restart,
            self.cfg.tau,
            &self.tol,
        );
        if outcome.passed_sparsity() {
            state.passed_sparsity += 1;
        }
        outcome.stored()
    }

    /// Mid-loop filtering once the pool spans the batch rank; returns true
    /// when a perfect score was found.
    fn try_finalize(&self, state: &mut SinkState) -> bool {
        let b = self.pair.rank;
        if state.pool.rank() < b {
            return false;
        }
        let chosen = init_filt(&state.pool, b);
        if chosen.len() < b {
            return false;
        }
        let Ok((outcome, sources)) = assemble(self.pair, self.capture, &self.tol, &state.pool, &chosen)
        else {
            return false;
        };
        if outcome.score.is_perfect() {
            state.success = Some((outcome, sources));
            true
        } else {
            false
        }
    }
}

impl CandidateSink for AttackSink<'_> {
    fn submit(&self, restart: usize, direction: DVector<f64>, rng: &mut dyn RngCore) -> bool {
        let direction = match &self.rounding {
            Some(rounding_cfg) => {
                match round_via_sampling(&self.pair.left, &direction, rounding_cfg, rng) {
                    Ok(Some(rounded)) => rounded,
                    _ => {
                        self.rounding_misses.fetch_add(1, Ordering::Relaxed);
                        return false;
                    }
                }
            }
            None => direction,
        };

        if let Some(buffer) = &self.deferred {
            buffer.lock().unwrap().push((restart, direction));
            return false;
        }

        let mut state = self.state.lock().unwrap();
        if state.success.is_some() {
            return true;
        }
        if self.add_to_pool(&mut state, restart, direction) {
            return self.try_finalize(&mut state);
        }
        false
    }
}

/// Builds the basis with `init_filt` indices `chosen`, pads with the
/// orthogonal complement if needed, runs the greedy filter and resolves the
/// provenance of every final column.
fn assemble(
    pair: &LowRankPair,
    capture: &GradientCapture,
    tol: &AttackTolerances,
    pool: &CandidatePool,
    chosen: &[usize],
) -> Result<(GreedyOutcome, Vec<ColumnSource>)> {
    let b = pair.rank;
    let mut basis: Vec<DVector<f64>> = chosen
        .iter()
        .map(|&i| pool.entries()[i].direction.clone())
        .collect();
    let mut sources: Vec<ColumnSource> = chosen
        .iter()
        .map(|&i| ColumnSource::Restart(pool.entries()[i].restart))
        .collect();
    if basis.len() < b {
        for filler in ortho_complement(&basis, b) {
            basis.push(filler);
            sources.push(ColumnSource::Complement);
        }
    }

    // Spares: every pooled candidate not in the basis, sparsest first.
    let in_basis: std::collections::BTreeSet<usize> = chosen.iter().copied().collect();
    let mut spare_order: Vec<usize> = pool
        .selection_order()
        .into_iter()
        .filter(|i| !in_basis.contains(i))
        .collect();
    spare_order.truncate(pool.len());
    let spares: Vec<DVector<f64>> = spare_order
        .iter()
        .map(|&i| pool.entries()[i].direction.clone())
        .collect();

    let outcome = greedy_filt(
        &pair.left,
        &pair.right,
        &capture.layer_weight,
        &capture.layer_bias,
        &capture.bias_gradient,
        &basis,
        &spares,
        &tol.score,
    )?;
    for (j, swap) in outcome.swapped_in.iter().enumerate() {
        if let Some(s_idx) = swap {
            sources[j] = ColumnSource::Restart(pool.entries()[spare_order[*s_idx]].restart);
        }
    }
    Ok((outcome, sources))
}

/// Multiplier turning the DP noise level into an absolute zero threshold:
/// first-order perturbation of the singular subspace scales noise by
/// 1/sigma_b, and three standard deviations cover the zero cluster.
const NOISE_FLOOR_SIGMAS: f64 = 3.0;

fn zero_tolerance_for(
    capture: &GradientCapture,
    cfg: &AttackConfig,
    pair: &LowRankPair,
) -> AttackTolerances {
    let noise_std = capture.protocol.noise_std();
    let noise_floor = if noise_std > 0.0 {
        let sigma_b = pair.singular_values[pair.rank - 1].max(f64::MIN_POSITIVE);
        NOISE_FLOOR_SIGMAS * noise_std / sigma_b
    } else {
        0.0
    };
    AttackTolerances {
        acceptance: ZeroTolerance {
            relative: cfg.acceptance_tol_rel,
            noise_floor,
        },
        score: ZeroTolerance {
            relative: cfg.zero_tol_rel,
            noise_floor,
        },
    }
}

/// Runs the full attack on one capture.
pub fn run_attack(capture: &GradientCapture, cfg: &AttackConfig) -> Result<AttackOutcome> {
    let started = Instant::now();
    cfg.optimizer.validate()?;
    if !(0.0..=1.0).contains(&cfg.tau) {
        return Err(Error::Config(format!("tau must lie in [0, 1], got {}", cfg.tau)));
    }

    let (m, n) = capture.weight_gradient.shape();
    let rule = match cfg.b_override {
        Some(b) => {
            if b == 0 || b > m.min(n) {
                return Err(Error::AttackPrecondition(format!(
                    "batch rank {b} outside 1..={}",
                    m.min(n)
                )));
            }
            RankRule::Fixed(b)
        }
        None if capture.protocol.noise_std() > 0.0 => RankRule::NoisyGap,
        None => RankRule::Clean(crate::decomp::CLEAN_RANK_TOL),
    };
    let pair = decompose_with_rule(&capture.weight_gradient, rule).map_err(|e| match e {
        Error::Rank(msg) => Error::AttackPrecondition(msg),
        other => other,
    })?;
    let b = pair.rank;
    let tol = zero_tolerance_for(capture, cfg, &pair);

    let (outcome, sources, restart_report) = if b == 1 {
        // One datum: the disaggregation matrix is the 1x1 scale, no search.
        let basis = vec![DVector::from_element(1, 1.0)];
        let outcome = greedy_filt(
            &pair.left,
            &pair.right,
            &capture.layer_weight,
            &capture.layer_bias,
            &capture.bias_gradient,
            &basis,
            &[],
            &tol.score,
        )?;
        let report = RestartReport {
            requested: 0,
            executed: 0,
            failed: 0,
            passed_sparsity: 0,
            rounding_misses: 0,
            pool_size: 0,
            pool_rank: 0,
            early_terminated: false,
        };
        (outcome, vec![ColumnSource::Complement], report)
    } else {
        let rounding = cfg.rounding_enabled().then_some(cfg.rounding_cfg);
        if let Some(rounding_cfg) = &rounding {
            // Surface r < b as a config error before any restart runs.
            let r = (rounding_cfg.r_factor * b as f64).round() as usize;
            if r < b || rounding_cfg.samples_per_direction == 0 {
                return Err(Error::Config(format!(
                    "rounding pool r = {r} with {} samples is invalid for rank {b}",
                    rounding_cfg.samples_per_direction
                )));
            }
        }
        let sink = AttackSink {
            pair: &pair,
            capture,
            cfg,
            tol,
            rounding,
            rounding_misses: AtomicUsize::new(0),
            state: Mutex::new(SinkState {
                pool: CandidatePool::new(cfg.dedup_tol),
                passed_sparsity: 0,
                success: None,
            }),
            deferred: (!cfg.early_termination).then(|| Mutex::new(Vec::new())),
        };

        let stats = if cfg.threads > 0 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
            pool.install(|| run_restarts(&pair.left, &cfg.loss, &cfg.optimizer, &sink))
        } else {
            run_restarts(&pair.left, &cfg.loss, &cfg.optimizer, &sink)
        };

        let mut state = sink.state.into_inner().unwrap();
        if let Some(buffer) = sink.deferred {
            let mut submissions = buffer.into_inner().unwrap();
            submissions.sort_by_key(|(restart, _)| *restart);
            for (restart, direction) in submissions {
                sink_add(&mut state, &pair, cfg, &tol, restart, direction);
            }
        }

        let (outcome, sources) = match state.success.take() {
            Some(found) => found,
            None => {
                let chosen = init_filt(&state.pool, b);
                assemble(&pair, capture, &tol, &state.pool, &chosen)?
            }
        };
        let report = RestartReport {
            requested: stats.requested,
            executed: stats.executed,
            failed: stats.failed,
            passed_sparsity: state.passed_sparsity,
            rounding_misses: sink.rounding_misses.load(Ordering::Relaxed),
            pool_size: state.pool.len(),
            pool_rank: state.pool.rank(),
            early_terminated: stats.stopped_early,
        };
        (outcome, sources, report)
    };

    let (psnr_per_column, psnr_average) = match &capture.truth {
        Some(truth) => {
            let scores =
                metrics::match_and_score(&truth.inputs, &outcome.reconstruction, cfg.psnr_peak)?;
            let average = metrics::average_psnr(&scores);
            (Some(scores), Some(average))
        }
        None => (None, None),
    };

    let report = ReconstructionReport {
        lambda: outcome.score.lambda,
        score: outcome.score,
        batch_rank: b,
        width: m,
        input_dim: n,
        protocol: capture.protocol.clone(),
        restarts: restart_report,
        column_sources: sources,
        degenerate_columns: outcome.disaggregation.degenerate_columns.clone(),
        psnr_per_column,
        psnr_average,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        config: cfg.clone(),
    };
    Ok(AttackOutcome {
        report,
        reconstruction: outcome.reconstruction,
    })
}

fn sink_add(
    state: &mut SinkState,
    pair: &LowRankPair,
    cfg: &AttackConfig,
    tol: &AttackTolerances,
    restart: usize,
    direction: DVector<f64>,
) {
    let outcome = state
        .pool
        .submit_candidate(&pair.left, direction, restart, cfg.tau, tol);
    if outcome.passed_sparsity() {
        state.passed_sparsity += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fl_sim::{capture_fedsgd, Batch, MlpModel};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn small_capture(m: usize, n: usize, b: usize, seed: u64) -> GradientCapture {
        let model = MlpModel::random(n, m, 3, 10, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let inputs = DMatrix::from_fn(n, b, |_, _| rng.sample::<f64, _>(StandardNormal));
        let labels = (0..b).map(|_| rng.gen_range(0..10)).collect();
        let batch = Batch::new(inputs, labels).unwrap();
        capture_fedsgd(&model, &batch, seed).unwrap()
    }

    fn quick_config(restarts: usize, seed: u64) -> AttackConfig {
        let mut optimizer = OptimizerConfig::riemannian_adam_default();
        optimizer.restarts = restarts;
        optimizer.master_seed = seed;
        AttackConfig::new(SurrogateLoss::L1, optimizer)
    }

    #[test]
    fn single_datum_reconstruction_is_exact_without_search() {
        let capture = small_capture(32, 24, 1, 71);
        let outcome = run_attack(&capture, &quick_config(10, 0)).unwrap();
        assert_eq!(outcome.report.batch_rank, 1);
        assert_eq!(outcome.report.restarts.executed, 0);
        assert_eq!(outcome.report.lambda, 1.0);
        let truth = capture.truth.as_ref().unwrap();
        let gap = (&outcome.reconstruction - &truth.inputs).abs().max();
        assert!(gap < 1e-8, "max gap {gap}");
    }

    #[test]
    fn small_fedsgd_batch_is_recovered_exactly() {
        let capture = small_capture(64, 48, 4, 72);
        let outcome = run_attack(&capture, &quick_config(400, 5)).unwrap();
        assert_eq!(outcome.report.lambda, 1.0, "report {:?}", outcome.report.restarts);
        assert!(outcome.report.restarts.early_terminated);
        let truth = capture.truth.as_ref().unwrap();
        let scores =
            metrics::match_and_score(&truth.inputs, &outcome.reconstruction, 1.0).unwrap();
        assert!(metrics::average_psnr(&scores) > 90.0);
    }

    #[test]
    fn attack_is_scale_invariant() {
        let capture = small_capture(64, 48, 4, 73);
        let mut scaled = capture.clone();
        scaled.weight_gradient *= 12.5;
        scaled.bias_gradient *= 12.5;
        let cfg = quick_config(400, 6);
        let base = run_attack(&capture, &cfg).unwrap();
        let rescaled = run_attack(&scaled, &cfg).unwrap();
        let gap = (&base.reconstruction - &rescaled.reconstruction).abs().max();
        assert!(gap <= 1e-8, "max gap {gap}");
    }

    #[test]
    fn precondition_errors_are_typed() {
        let capture = small_capture(32, 24, 2, 74);
        let mut cfg = quick_config(10, 0);
        cfg.b_override = Some(100);
        assert!(matches!(
            run_attack(&capture, &cfg),
            Err(Error::AttackPrecondition(_))
        ));

        let mut zero = capture.clone();
        zero.weight_gradient.fill(0.0);
        assert!(matches!(
            run_attack(&zero, &quick_config(10, 0)),
            Err(Error::AttackPrecondition(_))
        ));
    }

    #[test]
    fn lambda_stays_in_range_even_without_enough_candidates() {
        let capture = small_capture(48, 36, 6, 75);
        // One restart cannot span rank 6; the complement fills in.
        let mut cfg = quick_config(1, 7);
        cfg.early_termination = false;
        let outcome = run_attack(&capture, &cfg).unwrap();
        assert!((0.0..=1.0).contains(&outcome.report.lambda));
        assert!(outcome
            .report
            .column_sources
            .iter()
            .any(|s| matches!(s, ColumnSource::Complement)));
        assert_eq!(outcome.report.restarts.executed, 1);
    }
}
