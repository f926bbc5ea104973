//! Checkable conditions from the VI analysis: the Υ matrix and its P-matrix
//! test, sampled monotonicity and co-coercivity constants, and KKT residuals.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::constraints::{eval_equality, eval_inequality, grad_inequality, ConstraintSpec};
use crate::error::{GadmmError, Result};
use crate::losses::loss_gradient;
use crate::model::{Problem, SystemState};
use crate::par::{map_indices, Execution};
use crate::protection::protection_cross_coupling;

pub const P_MATRIX_MAX_ORDER: usize = 20;

/// Where an entry of Υ came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum EntrySource {
    /// Smallest Hessian eigenvalue of user `n`'s loss.
    AlphaMin { user: usize },
    /// As `AlphaMin` plus 1 for the proximal term.
    ProximalAlphaMin { user: usize },
    /// Protection coupling bound `2ς_n` between users `n` and `m`.
    CrossCoupling { user: usize, other: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpsilonMatrix {
    pub entries: DMatrix<f64>,
    pub provenance: Vec<Vec<EntrySource>>,
}

/// `[Υ]_nn = α_n^min (+1)`, `[Υ]_nm = −2ς_n`.
pub fn build_upsilon(problem: &Problem, include_proximal: bool) -> UpsilonMatrix {
    let n = problem.n_users();
    let mut entries = DMatrix::zeros(n, n);
    let mut provenance = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(n);
        for j in 0..n {
            if i == j {
                let alpha = problem.curvature(i).0;
                if include_proximal {
                    entries[(i, j)] = alpha + 1.0;
                    row.push(EntrySource::ProximalAlphaMin { user: i });
                } else {
                    entries[(i, j)] = alpha;
                    row.push(EntrySource::AlphaMin { user: i });
                }
            } else {
                entries[(i, j)] = -protection_cross_coupling(&problem.protection, i);
                row.push(EntrySource::CrossCoupling { user: i, other: j });
            }
        }
        provenance.push(row);
    }
    UpsilonMatrix { entries, provenance }
}

const MASKS_PER_TASK: u64 = 4096;

fn principal_minor_positive(m: &DMatrix<f64>, max_abs: f64, mask: u64) -> bool {
    let idx: Vec<usize> = (0..m.nrows()).filter(|&i| mask & (1 << i) != 0).collect();
    let sub = DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])]);
    // minors below round-off relative to the entry scale count as zero
    sub.determinant() > 1e-12 * max_abs.powi(idx.len() as i32)
}

/// True iff every principal minor is strictly positive.
pub fn is_p_matrix(m: &DMatrix<f64>) -> Result<bool> {
    is_p_matrix_with(m, Execution::default())
}

pub fn is_p_matrix_with(m: &DMatrix<f64>, exec: Execution) -> Result<bool> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(GadmmError::invalid("P-matrix test needs a square matrix"));
    }
    if n > P_MATRIX_MAX_ORDER {
        return Err(GadmmError::SizeLimit(n));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(GadmmError::NumericDomain("matrix has non-finite entries".into()));
    }
    let max_abs = m.amax().max(f64::MIN_POSITIVE);
    let total = 1u64 << n;
    let tasks = total.div_ceil(MASKS_PER_TASK) as usize;
    let ok = map_indices(exec, tasks, |t| {
        let start = (t as u64 * MASKS_PER_TASK).max(1);
        let end = ((t as u64 + 1) * MASKS_PER_TASK).min(total);
        (start..end).all(|mask| principal_minor_positive(m, max_abs, mask))
    });
    Ok(ok.into_iter().all(|b| b))
}

fn sample_in_box(rng: &mut ChaCha8Rng, dim: usize, lo: f64, hi: f64) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.random_range(lo..hi))
}

/// Settings shared by the sampled estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub sample_count: usize,
    pub seed: u64,
    pub execution: Execution,
}

impl SamplingConfig {
    pub fn new(sample_count: usize, seed: u64) -> Self {
        Self { sample_count, seed, execution: Execution::default() }
    }
}

/// Minimum sampled ratio; pair `i` draws from its own ChaCha stream so the
/// result does not depend on scheduling.
fn sampled_min<R>(cfg: &SamplingConfig, ratio: R) -> Result<f64>
where
    R: Fn(&mut ChaCha8Rng) -> Option<f64> + Sync + Send,
{
    if cfg.sample_count < 2 {
        return Err(GadmmError::invalid("sample_count must be >= 2"));
    }
    let ratios = map_indices(cfg.execution, cfg.sample_count, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        ratio(&mut rng)
    });
    let usable: Vec<f64> = ratios.into_iter().flatten().collect();
    if usable.is_empty() {
        return Err(GadmmError::InsufficientSamples(0));
    }
    Ok(usable.into_iter().fold(f64::INFINITY, f64::min))
}

/// Empirical strong-monotonicity constant
/// `min (w₁−w₂)ᵀ(F(w₁)−F(w₂)) / ‖w₁−w₂‖²` over pairs drawn from `[−B, B]^dim`.
pub fn estimate_strong_monotonicity<F>(f: F, dim: usize, domain_box: f64, cfg: &SamplingConfig) -> Result<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64> + Sync + Send,
{
    sampled_min(cfg, |rng| {
        let a = sample_in_box(rng, dim, -domain_box, domain_box);
        let b = sample_in_box(rng, dim, -domain_box, domain_box);
        let diff = &a - &b;
        let sq = diff.norm_squared();
        (sq > 0.0).then(|| diff.dot(&(f(&a) - f(&b))) / sq)
    })
}

/// Empirical co-coercivity constant
/// `min (λ₁−λ₂)ᵀ(φ(λ₁)−φ(λ₂)) / ‖φ(λ₁)−φ(λ₂)‖²` over pairs in `[0, B]^dim`.
pub fn estimate_cocoercivity<F>(phi: F, dim: usize, lambda_box: f64, cfg: &SamplingConfig) -> Result<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64> + Sync + Send,
{
    sampled_min(cfg, |rng| {
        let a = sample_in_box(rng, dim, 0.0, lambda_box);
        let b = sample_in_box(rng, dim, 0.0, lambda_box);
        let dphi = phi(&a) - phi(&b);
        let sq = dphi.norm_squared();
        (sq > 0.0).then(|| (&a - &b).dot(&dphi) / sq)
    })
}

/// The stacked game map `F(w)_n = ∇_{w_n} V_n(w_n)`; with `robust` set it
/// also carries the protection terms every other user places on `w_n`,
/// `2 Σ_{m≠n} ς_m w_n`.
pub fn game_operator(problem: &Problem, robust: bool) -> impl Fn(&DVector<f64>) -> DVector<f64> + Sync + Send + '_ {
    let n_users = problem.n_users();
    let d = problem.dim();
    let total_sigma: f64 = (0..n_users).map(|m| problem.protection.varsigma(m)).sum();
    move |w: &DVector<f64>| {
        let mut out = DVector::zeros(n_users * d);
        for n in 0..n_users {
            let wn = w.rows(n * d, d).clone_owned();
            let mut g = loss_gradient(problem.loss, &wn, &problem.datasets[n]).unwrap_or_else(|_| DVector::zeros(d));
            if robust {
                g += &wn * (2.0 * (total_sigma - problem.protection.varsigma(n)));
            }
            out.rows_mut(n * d, d).copy_from(&g);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KKTResidual {
    pub stationarity_norm: f64,
    pub equality_norm: f64,
    pub complementarity_gap: f64,
    pub dual_feasibility_violation: f64,
    pub primal_violation: f64,
}

/// KKT residuals of the per-user problems at `state`.
///
/// Stationarity stacks `∇V_n + μ_n ∇Σg¹_n + λ_n ∇g²_n` over users with the
/// `z` block `Σ_n (μ_n ∇_z Σg¹_n + λ_n ∇_z g²_n)`.
pub fn kkt_residual(state: &SystemState, problem: &Problem) -> Result<KKTResidual> {
    state.validate()?;
    if state.n_users() != problem.n_users() || state.dim() != problem.dim() {
        return Err(GadmmError::invalid("state does not match the problem"));
    }
    let d = problem.dim();
    let z = &state.consensus;
    let spec = &problem.constraint;
    let mut stationarity_sq = 0.0;
    let mut z_grad = DVector::zeros(d);
    let mut equality_sq = 0.0;
    let mut comp = 0.0f64;
    let mut primal = 0.0f64;
    for n in 0..problem.n_users() {
        let w = &state.weights[n];
        let mut g = loss_gradient(problem.loss, w, &problem.datasets[n])?;
        g.add_scalar_mut(state.mu[n] * spec.equality_sum_slope(n));
        let (gw, gz) = grad_inequality(spec, n, w, z)?;
        g += gw * state.lambda[n];
        z_grad += gz * state.lambda[n];
        if let ConstraintSpec::Classical = spec {
            z_grad.add_scalar_mut(-state.mu[n]);
        }
        stationarity_sq += g.norm_squared();
        equality_sq += eval_equality(spec, n, w, z, &state.weights)?.norm_squared();
        let g2 = eval_inequality(spec, n, w, z)?;
        comp = comp.max((state.lambda[n] * g2).abs());
        primal = primal.max(g2.max(0.0));
    }
    if spec.uses_server() {
        stationarity_sq += z_grad.norm_squared();
    }
    let min_lambda = state.lambda.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(KKTResidual {
        stationarity_norm: stationarity_sq.sqrt(),
        equality_norm: equality_sq.sqrt(),
        complementarity_gap: comp,
        dual_feasibility_violation: (-min_lambda).max(0.0),
        primal_violation: primal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossKind;
    use crate::model::{generate_synthetic, UserDataset};
    use crate::protection::ProtectionSpec;
    use proptest::prelude::*;
    use rand::Rng;

    fn identity_problem(varsigma: f64) -> Problem {
        let ds = || UserDataset::new(DMatrix::identity(2, 2), DVector::zeros(2)).unwrap();
        Problem::new(
            LossKind::Linear,
            vec![ds(), ds()],
            ConstraintSpec::Classical,
            ProtectionSpec::uniform(varsigma, 0.1, 2),
        )
        .unwrap()
    }

    fn zero_state(n: usize, d: usize) -> SystemState {
        SystemState {
            weights: vec![DVector::zeros(d); n],
            consensus: DVector::zeros(d),
            lambda: vec![0.0; n],
            mu: vec![0.0; n],
            iteration: 0,
        }
    }

    #[test]
    fn upsilon_identity_example() {
        let u = build_upsilon(&identity_problem(0.0), false);
        assert!((u.entries.clone() - DMatrix::identity(2, 2)).norm() < 1e-12);
        assert_eq!(u.provenance[0][1], EntrySource::CrossCoupling { user: 0, other: 1 });
        let prox = build_upsilon(&identity_problem(0.0), true);
        assert!((prox.entries[(0, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn upsilon_off_diagonal_from_varsigma() {
        let u = build_upsilon(&identity_problem(1e-3), false);
        assert!((u.entries[(0, 1)] + 2e-3).abs() < 1e-18);
        assert!((u.entries[(1, 0)] + 2e-3).abs() < 1e-18);
    }

    #[test]
    fn upsilon_diagonal_matches_eigensolver() {
        let data = generate_synthetic(6, 4, 8, 3, 0.1, LossKind::Linear).unwrap();
        let p = Problem::new(LossKind::Linear, data.datasets.clone(), ConstraintSpec::Classical, ProtectionSpec::None)
            .unwrap();
        let u = build_upsilon(&p, false);
        for (n, ds) in data.datasets.iter().enumerate() {
            let gram = ds.features().tr_mul(ds.features());
            let oracle = gram.symmetric_eigen().eigenvalues.min();
            assert!((u.entries[(n, n)] - oracle).abs() < 1e-8);
        }
    }

    #[test]
    fn p_matrix_examples() {
        assert!(is_p_matrix(&DMatrix::identity(4, 4)).unwrap());
        let m = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, -2.0, 1.0]);
        assert!(!is_p_matrix(&m).unwrap());
        assert!(matches!(is_p_matrix(&DMatrix::identity(21, 21)), Err(GadmmError::SizeLimit(21))));
        // positive but not symmetric
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 0.0, 1.0]);
        assert!(is_p_matrix(&m).unwrap());
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(!is_p_matrix(&singular).unwrap());
    }

    #[test]
    fn p_matrix_sequential_matches_parallel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let m = DMatrix::from_fn(6, 6, |i, j| if i == j { 2.0 } else { rng.random_range(-0.6..0.6) });
            assert_eq!(
                is_p_matrix_with(&m, Execution::Sequential).unwrap(),
                is_p_matrix_with(&m, Execution::Parallel).unwrap()
            );
        }
    }

    #[test]
    fn diagonal_upsilon_verdict_is_positivity() {
        for seed in 0..6 {
            let mut datasets = generate_synthetic(seed, 3, 8, 3, 0.1, LossKind::Linear).unwrap().datasets;
            if seed % 2 == 1 {
                // a zero feature column makes user 2's loss flat in that direction
                let mut x = datasets[2].features().clone();
                x.column_mut(1).fill(0.0);
                datasets[2] = UserDataset::new(x, datasets[2].labels().clone()).unwrap();
            }
            let p = Problem::new(LossKind::Linear, datasets, ConstraintSpec::Classical, ProtectionSpec::None).unwrap();
            let u = build_upsilon(&p, false);
            assert!(u.entries.iter().enumerate().all(|(k, v)| k % 4 == 0 || *v == 0.0));
            let all_pos = (0..3).all(|n| u.entries[(n, n)] > 1e-9);
            assert_eq!(all_pos, seed % 2 == 0);
            assert_eq!(is_p_matrix(&u.entries).unwrap(), all_pos, "seed {seed}");
        }
    }

    #[test]
    fn strong_monotonicity_examples() {
        let cfg = SamplingConfig::new(500, 1);
        let c = estimate_strong_monotonicity(|w: &DVector<f64>| w * 2.0, 3, 1.0, &cfg).unwrap();
        assert!((c - 2.0).abs() < 1e-6);
        let k = estimate_strong_monotonicity(|w: &DVector<f64>| w * 10.0, 3, 1.0, &cfg).unwrap();
        assert!((k - 5.0 * c).abs() < 1e-6);
        // smoothed |w|: curvature vanishes away from the origin
        let smooth_abs = |w: &DVector<f64>| w.map(|v| v / (v * v + 1e-2).sqrt());
        let flat = estimate_strong_monotonicity(smooth_abs, 1, 100.0, &SamplingConfig::new(2000, 3)).unwrap();
        assert!(flat >= 0.0 && flat < 1e-3, "{flat}");
    }

    #[test]
    fn insufficient_samples() {
        let cfg = SamplingConfig::new(1, 0);
        assert!(estimate_strong_monotonicity(|w: &DVector<f64>| w.clone(), 2, 1.0, &cfg).is_err());
        // φ constant: every pair is skipped
        let c = estimate_cocoercivity(|_: &DVector<f64>| DVector::from_element(2, 1.0), 2, 1.0, &SamplingConfig::new(10, 0));
        assert!(matches!(c, Err(GadmmError::InsufficientSamples(0))));
    }

    #[test]
    fn cocoercivity_examples() {
        let cfg = SamplingConfig::new(300, 9);
        let one = estimate_cocoercivity(|l: &DVector<f64>| l.clone(), 3, 2.0, &cfg).unwrap();
        assert!((one - 1.0).abs() < 1e-12);
        let half = estimate_cocoercivity(|l: &DVector<f64>| l * 2.0, 3, 2.0, &cfg).unwrap();
        assert!((half - 0.5).abs() < 1e-12);
        // threshold from the estimate, by hand: (1/0.5 + 1)² / 2 = 4.5
        assert!((crate::multipliers::tikhonov_threshold(1.0, half) - 4.5).abs() < 1e-9);
    }

    #[test]
    fn estimates_do_not_depend_on_execution() {
        let f = |w: &DVector<f64>| w.map(|v| v * v * v + v);
        let a = estimate_strong_monotonicity(f, 4, 1.0, &SamplingConfig { execution: Execution::Sequential, ..SamplingConfig::new(200, 4) });
        let b = estimate_strong_monotonicity(f, 4, 1.0, &SamplingConfig::new(200, 4));
        assert_eq!(a.unwrap(), b.unwrap());
    }

    #[test]
    fn kkt_quadratic_stationary_point() {
        // two mirrored users with X = I, y = ±a and an active soft constraint:
        // z = 0, w_n = y_n / (1 + 2λ), ‖w_n‖² = ε
        let a = DVector::from_vec(vec![1.0, 0.5]);
        let eps = 0.01;
        let user = |y: DVector<f64>| UserDataset::new(DMatrix::identity(2, 2), y).unwrap();
        let p = Problem::new(
            LossKind::Linear,
            vec![user(a.clone()), user(-&a)],
            ConstraintSpec::soft_norm(2, eps, 2),
            ProtectionSpec::None,
        )
        .unwrap();
        let scale = a.norm() / eps.sqrt();
        let lam = (scale - 1.0) / 2.0;
        let mut s = zero_state(2, 2);
        s.weights = vec![&a / scale, -&a / scale];
        s.lambda = vec![lam, lam];
        let r = kkt_residual(&s, &p).unwrap();
        assert!(r.stationarity_norm < 1e-8, "{r:?}");
        assert!(r.equality_norm < 1e-8);
        assert!(r.complementarity_gap < 1e-8);
        assert!(r.primal_violation < 1e-8);
        assert_eq!(r.dual_feasibility_violation, 0.0);
    }

    #[test]
    fn kkt_classical_consensus_point() {
        // zero-noise data: w* is stationary for every user
        let data = generate_synthetic(8, 3, 6, 2, 0.0, LossKind::Linear).unwrap();
        let p = Problem::new(LossKind::Linear, data.datasets, ConstraintSpec::Classical, ProtectionSpec::None).unwrap();
        let mut s = zero_state(3, 2);
        s.weights = vec![data.ground_truth.clone(); 3];
        s.consensus = data.ground_truth.clone();
        let r = kkt_residual(&s, &p).unwrap();
        assert!(r.stationarity_norm < 1e-8);
        assert!(r.equality_norm < 1e-12);
        assert_eq!(r.complementarity_gap, 0.0);
    }

    #[test]
    fn kkt_examples() {
        let p = Problem::new(
            LossKind::Linear,
            vec![UserDataset::new(DMatrix::identity(1, 1), DVector::zeros(1)).unwrap()],
            ConstraintSpec::soft_norm(2, 0.05, 1),
            ProtectionSpec::None,
        )
        .unwrap();
        let mut s = zero_state(1, 1);
        s.weights[0] = DVector::from_vec(vec![0.5]);
        let r = kkt_residual(&s, &p).unwrap();
        assert_eq!(r.complementarity_gap, 0.0);
        assert!((r.primal_violation - 0.2).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn robust_monotonicity_transfer(seed in 0u64..30, varsigma in 0.0f64..0.01) {
            let data = generate_synthetic(seed, 3, 10, 2, 0.2, LossKind::Linear).unwrap();
            let plain = Problem::new(LossKind::Linear, data.datasets.clone(), ConstraintSpec::Classical, ProtectionSpec::None).unwrap();
            let robust = Problem::new(
                LossKind::Linear,
                data.datasets,
                ConstraintSpec::Classical,
                ProtectionSpec::uniform(varsigma, 0.1, 3),
            )
            .unwrap();
            let cfg = SamplingConfig::new(200, seed);
            let c = estimate_strong_monotonicity(game_operator(&plain, false), 6, 2.0, &cfg).unwrap();
            let cr = estimate_strong_monotonicity(game_operator(&robust, true), 6, 2.0, &cfg).unwrap();
            prop_assert!(c > 0.0);
            prop_assert!(cr >= c - 4.0 * varsigma * 3.0);
        }
    }
}
