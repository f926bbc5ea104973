//! Multiplier updates: the NCP map `φ` and the fixed, projection,
//! hyperplane and Tikhonov schemes for `λ`, plus the `μ` gradient step.

use crate::constraints::{eval_inequality, ConstraintSpec};
use crate::error::{GadmmError, Result};
use crate::model::SystemState;

#[derive(Debug, Clone, PartialEq)]
pub enum MultiplierScheme {
    /// Constant multipliers for the whole run.
    Fixed { lambda0: f64, mu0: f64 },
    /// `λ ← [λ − τφ]⁺`
    Projection { tau: f64 },
    /// Extragradient step with Armijo backtracking and a hyperplane projection.
    Hyperplane { delta: f64, max_backtracks: u32 },
    /// Projection on the perturbed map `φ + ζ_k I`, `ζ_k = zeta0 / (k + 1)`.
    Tikhonov { zeta0: f64, tau_n: f64, inner_iters: usize },
}

impl MultiplierScheme {
    pub fn hyperplane(delta: f64) -> Self {
        MultiplierScheme::Hyperplane { delta, max_backtracks: 40 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MultiplierScheme::Fixed { .. } => "fixed",
            MultiplierScheme::Projection { .. } => "projection",
            MultiplierScheme::Hyperplane { .. } => "hyperplane",
            MultiplierScheme::Tikhonov { .. } => "tikhonov",
        }
    }

    pub fn is_variable(&self) -> bool {
        !matches!(self, MultiplierScheme::Fixed { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            MultiplierScheme::Fixed { lambda0, mu0 } => {
                if !(lambda0 >= 0.0 && lambda0.is_finite()) || !mu0.is_finite() {
                    return Err(GadmmError::invalid("fixed multipliers need finite mu0 and lambda0 >= 0"));
                }
            }
            MultiplierScheme::Projection { tau } => {
                if !(tau > 0.0 && tau.is_finite()) {
                    return Err(GadmmError::invalid("projection tau must be > 0"));
                }
            }
            MultiplierScheme::Hyperplane { delta, .. } => {
                if !(delta > 0.0 && delta < 1.0) {
                    return Err(GadmmError::invalid("hyperplane delta must lie in (0, 1)"));
                }
            }
            MultiplierScheme::Tikhonov { zeta0, tau_n, inner_iters } => {
                if !(zeta0 > 0.0 && zeta0.is_finite()) {
                    return Err(GadmmError::invalid("tikhonov zeta0 must be > 0"));
                }
                if !(tau_n > 0.0 && tau_n.is_finite()) {
                    return Err(GadmmError::invalid("tikhonov tau_n must be > 0"));
                }
                if inner_iters == 0 {
                    return Err(GadmmError::invalid("tikhonov inner_iters must be >= 1"));
                }
            }
        }
        Ok(())
    }
}

/// Regularisation weight `ζ_k = ζ₀ / (k + 1)` at round `k`.
pub fn tikhonov_zeta(zeta0: f64, round: usize) -> f64 {
    zeta0 / (round as f64 + 1.0)
}

/// `φ_n = −g²_n(w_n, z)`: positive slack when the constraint holds.
pub fn phi(state: &SystemState, constraint: &ConstraintSpec) -> Result<Vec<f64>> {
    (0..state.n_users())
        .map(|n| eval_inequality(constraint, n, &state.weights[n], &state.consensus).map(|g| -g))
        .collect()
}

fn check_lengths(lambda: &[f64], phi_vals: &[f64]) -> Result<()> {
    if lambda.len() != phi_vals.len() {
        return Err(GadmmError::invalid("lambda and phi lengths differ"));
    }
    Ok(())
}

pub fn projection_update(lambda: &[f64], phi_vals: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_lengths(lambda, phi_vals)?;
    Ok(lambda.iter().zip(phi_vals).map(|(l, p)| (l - tau * p).max(0.0)).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One hyperplane-projection update.
///
/// 1. `y = [λ − φ(λ)]⁺`, `r = λ − y`.
/// 2. Smallest `l` with `rᵀφ(λ − 2^{−l} r) ≥ δ‖r‖²`.
/// 3. Project `λ` onto the separating half-space through the trial point,
///    intersected with `λ ≥ 0`. A zero `φ` at the trial point returns `y`.
pub fn hyperplane_update<F>(lambda: &[f64], mut phi_eval: F, delta: f64, max_backtracks: u32) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let phi0 = phi_eval(lambda)?;
    check_lengths(lambda, &phi0)?;
    let quarter: Vec<f64> = lambda.iter().zip(&phi0).map(|(l, p)| (l - p).max(0.0)).collect();
    let r: Vec<f64> = lambda.iter().zip(&quarter).map(|(l, y)| l - y).collect();
    let r_sq = dot(&r, &r);
    if r_sq == 0.0 {
        return Ok(lambda.to_vec());
    }
    let mut accepted = None;
    for l in 0..=max_backtracks {
        let t = 0.5f64.powi(l as i32);
        let trial: Vec<f64> = lambda.iter().zip(&r).map(|(x, ri)| x - t * ri).collect();
        let phi_t = phi_eval(&trial)?;
        check_lengths(lambda, &phi_t)?;
        if dot(&r, &phi_t) >= delta * r_sq {
            accepted = Some((t, phi_t));
            break;
        }
    }
    let (t, phi_y) = accepted.ok_or(GadmmError::StepSearchFailed { last_l: max_backtracks })?;
    if dot(&phi_y, &phi_y) == 0.0 {
        return Ok(quarter);
    }
    let trial: Vec<f64> = lambda.iter().zip(&r).map(|(x, ri)| x - t * ri).collect();
    Ok(project_halfspace_orthant(lambda, &phi_y, dot(&phi_y, &trial)))
}

/// Projection of `x` onto `{v ≥ 0 : aᵀv ≤ b}`: `v(θ) = [x − θa]⁺` with the
/// smallest `θ ≥ 0` meeting the half-space, found by bisection since
/// `aᵀv(θ)` is non-increasing.
fn project_halfspace_orthant(x: &[f64], a: &[f64], b: f64) -> Vec<f64> {
    let at = |theta: f64| -> Vec<f64> { x.iter().zip(a).map(|(xi, ai)| (xi - theta * ai).max(0.0)).collect() };
    let excess = |theta: f64| dot(a, &at(theta)) - b;
    if excess(0.0) <= 0.0 {
        return at(0.0);
    }
    let mut hi = (excess(0.0) / dot(a, a)).max(f64::MIN_POSITIVE);
    for _ in 0..200 {
        if excess(hi) <= 0.0 {
            break;
        }
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if excess(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    at(hi)
}

/// Inner projection loop on the Tikhonov-perturbed map:
/// `λ̂ ← [λ̂ − (φ(λ̂) + ζλ̂) / τ_n]⁺`, started from `λ`.
pub fn tikhonov_update<F>(lambda: &[f64], mut phi_eval: F, zeta: f64, tau_n: f64, inner_iters: usize) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if !(zeta > 0.0 && tau_n > 0.0) {
        return Err(GadmmError::invalid("zeta and tau_n must be > 0"));
    }
    let mut hat = lambda.to_vec();
    for _ in 0..inner_iters {
        let p = phi_eval(&hat)?;
        check_lengths(&hat, &p)?;
        hat = hat.iter().zip(&p).map(|(h, pi)| (h - (pi + zeta * h) / tau_n).max(0.0)).collect();
    }
    Ok(hat)
}

/// `(1/c_coc + ζ)² / (2ζ)`
pub fn tikhonov_threshold(zeta: f64, c_coc: f64) -> f64 {
    let a = 1.0 / c_coc + zeta;
    a * a / (2.0 * zeta)
}

pub fn tikhonov_step_valid(tau_n: f64, zeta: f64, c_coc: f64) -> bool {
    tau_n > tikhonov_threshold(zeta, c_coc)
}

/// `μ_n ← μ_n + step · Σ_k g¹_{n,k}`
pub fn mu_update(mu: &[f64], equality_sums: &[f64], step: f64) -> Result<Vec<f64>> {
    check_lengths(mu, equality_sums)?;
    Ok(mu.iter().zip(equality_sums).map(|(m, g)| m + step * g).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state(weights: Vec<Vec<f64>>, z: Vec<f64>) -> SystemState {
        let n = weights.len();
        SystemState {
            weights: weights.into_iter().map(DVector::from_vec).collect(),
            consensus: DVector::from_vec(z),
            lambda: vec![0.0; n],
            mu: vec![0.0; n],
            iteration: 0,
        }
    }

    fn affine(a: DMatrix<f64>, b: DVector<f64>) -> impl FnMut(&[f64]) -> Result<Vec<f64>> {
        move |l: &[f64]| {
            let v = &a * DVector::from_row_slice(l) + &b;
            Ok(v.iter().copied().collect())
        }
    }

    // Solve the NCP 0 ≤ λ ⊥ Aλ + b ≥ 0 by enumerating active sets.
    fn brute_ncp(a: &DMatrix<f64>, b: &DVector<f64>) -> Vec<f64> {
        let n = b.len();
        for mask in 0..(1u32 << n) {
            let free: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let mut lam = DVector::zeros(n);
            if !free.is_empty() {
                let sub = DMatrix::from_fn(free.len(), free.len(), |i, j| a[(free[i], free[j])]);
                let rhs = DVector::from_fn(free.len(), |i, _| -b[free[i]]);
                let Some(sol) = sub.lu().solve(&rhs) else { continue };
                for (k, &i) in free.iter().enumerate() {
                    lam[i] = sol[k];
                }
            }
            let w = a * &lam + b;
            let ok = (0..n).all(|i| lam[i] >= -1e-12 && w[i] >= -1e-12 && (free.contains(&i) || lam[i] == 0.0));
            if ok {
                return lam.iter().copied().collect();
            }
        }
        panic!("no NCP solution found");
    }

    #[test]
    fn phi_examples() {
        let soft = ConstraintSpec::soft_norm(2, 0.1, 1);
        let s = state(vec![vec![0.5, 0.5]], vec![0.5, 0.5]);
        assert!((phi(&s, &soft).unwrap()[0] - 0.1).abs() < 1e-15);
        let s = state(vec![vec![0.3, 0.4]], vec![0.0, 0.0]);
        assert!((phi(&s, &soft).unwrap()[0] + 0.15).abs() < 1e-15);
        let s = state(vec![vec![1.0], vec![2.0]], vec![0.0]);
        assert_eq!(phi(&s, &ConstraintSpec::Classical).unwrap(), vec![0.0, 0.0]);
        assert_eq!(phi(&s, &ConstraintSpec::chain(2)).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn projection_examples() {
        assert_eq!(projection_update(&[1.0], &[0.0], 0.0002).unwrap(), vec![1.0]);
        assert_eq!(projection_update(&[0.001], &[10.0], 0.0002).unwrap(), vec![0.0]);
        let up = projection_update(&[0.5], &[-1.0], 0.0002).unwrap();
        assert!((up[0] - 0.5002).abs() < 1e-15);
        assert!(projection_update(&[0.5], &[1.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn hyperplane_fixed_point() {
        let phi_pos = |_: &[f64]| Ok(vec![2.0, 0.5]);
        assert_eq!(hyperplane_update(&[0.0, 0.0], phi_pos, 0.1, 40).unwrap(), vec![0.0, 0.0]);
        // complementary: λ > 0 with φ = 0
        let comp = |_: &[f64]| Ok(vec![0.0]);
        assert_eq!(hyperplane_update(&[1.3], comp, 0.1, 40).unwrap(), vec![1.3]);
    }

    #[test]
    fn hyperplane_scalar_affine_converges() {
        let mut lam = vec![0.0];
        for _ in 0..100 {
            lam = hyperplane_update(&lam, |l: &[f64]| Ok(vec![l[0] - 1.0]), 0.1, 40).unwrap();
        }
        assert!((lam[0] - 1.0).abs() < 1e-4, "{}", lam[0]);
    }

    #[test]
    fn hyperplane_search_failure_reports_last_l() {
        // φ jumps from −1 to +1 away from zero: no trial point passes
        let bad = |l: &[f64]| Ok(vec![if l[0] == 0.0 { -1.0 } else { 1.0 }]);
        match hyperplane_update(&[0.0], bad, 0.5, 5) {
            Err(GadmmError::StepSearchFailed { last_l }) => assert_eq!(last_l, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hyperplane_output_non_negative_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let b = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let a = &b * b.transpose() + DMatrix::identity(3, 3) * 0.1;
            let c = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let lam: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..3.0)).collect();
            let out = hyperplane_update(&lam, affine(a, c), 0.1, 60).unwrap();
            assert!(out.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn tikhonov_examples() {
        assert_eq!(tikhonov_update(&[0.0], |_: &[f64]| Ok(vec![0.0]), 0.1, 2.0, 10).unwrap(), vec![0.0]);
        let out = tikhonov_update(&[3.0], |_: &[f64]| Ok(vec![0.7]), 0.1, 2.0, 200).unwrap();
        assert_eq!(out, vec![0.0]);
    }

    #[test]
    fn tikhonov_scalar_affine_near_solution() {
        // perturbed fixed point of λ − 1 + ζλ = 0 is 1 / (1 + ζ)
        let zeta = 1e-3;
        let out = tikhonov_update(&[0.0], |l: &[f64]| Ok(vec![l[0] - 1.0]), zeta, 2.0, 2000).unwrap();
        let perturbed = 1.0 / (1.0 + zeta);
        assert!((out[0] - perturbed).abs() < 1e-10);
        assert!((out[0] - 1.0).abs() <= 2.0 * zeta);
    }

    #[test]
    fn tikhonov_validity_examples() {
        assert!(tikhonov_step_valid(3.0, 1.0, 1.0));
        assert!(!tikhonov_step_valid(2.0, 1.0, 1.0));
        assert_eq!(tikhonov_threshold(1.0, 1.0), 2.0);
    }

    #[test]
    fn tikhonov_threshold_minimised_at_inverse_cocoercivity() {
        for c in [0.5, 1.0, 4.0] {
            let grid = (1..=200_000).map(|i| i as f64 * 1e-4);
            let best = grid.min_by(|a, b| tikhonov_threshold(*a, c).partial_cmp(&tikhonov_threshold(*b, c)).unwrap()).unwrap();
            assert!((best - 1.0 / c).abs() < 2e-4, "c={c}: {best}");
        }
    }

    #[test]
    fn all_schemes_reach_brute_force_ncp() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..20 {
            let n = 2 + trial % 2;
            let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let a = &b * b.transpose() + DMatrix::identity(n, n) * 0.5;
            let c = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let want = brute_ncp(&a, &c);
            let lmax = a.symmetric_eigenvalues().max();

            let mut proj = vec![0.0; n];
            for _ in 0..20_000 {
                let p = affine(a.clone(), c.clone())(&proj).unwrap();
                proj = projection_update(&proj, &p, 1.0 / lmax).unwrap();
            }
            let mut hyp = vec![0.0; n];
            for _ in 0..500 {
                hyp = hyperplane_update(&hyp, affine(a.clone(), c.clone()), 0.1, 60).unwrap();
            }
            let mut tik = vec![0.0; n];
            for k in 0..400 {
                let zeta = tikhonov_zeta(1e-3, k);
                tik = tikhonov_update(&tik, affine(a.clone(), c.clone()), zeta, lmax + zeta, 50).unwrap();
            }
            for (name, got) in [("projection", &proj), ("hyperplane", &hyp), ("tikhonov", &tik)] {
                let err: f64 = got.iter().zip(&want).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                assert!(err < 1e-4, "{name} trial {trial}: {got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn mu_update_example() {
        assert_eq!(mu_update(&[1.0, -1.0], &[2.0, 0.0], 0.5).unwrap(), vec![2.0, -1.0]);
    }

    #[test]
    fn scheme_validation() {
        assert!(MultiplierScheme::Projection { tau: 0.0 }.validate().is_err());
        assert!(MultiplierScheme::hyperplane(1.0).validate().is_err());
        assert!(MultiplierScheme::hyperplane(0.3).validate().is_ok());
        assert!(MultiplierScheme::Tikhonov { zeta0: 0.1, tau_n: 1.0, inner_iters: 0 }.validate().is_err());
        assert!(MultiplierScheme::Fixed { lambda0: -1.0, mu0: 0.0 }.validate().is_err());
    }

    proptest! {
        #[test]
        fn schemes_preserve_non_negativity(
            lam in proptest::collection::vec(0.0f64..5.0, 3),
            shift in proptest::collection::vec(-5.0f64..5.0, 3),
            tau in 1e-4f64..2.0,
        ) {
            let p = projection_update(&lam, &shift, tau).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            let s = shift.clone();
            let t = tikhonov_update(&lam, move |l: &[f64]| Ok(l.iter().zip(&s).map(|(a, b)| a + b).collect()), 0.1, 2.0, 5).unwrap();
            prop_assert!(t.iter().all(|&v| v >= 0.0));
            let s = shift.clone();
            let h = hyperplane_update(&lam, move |l: &[f64]| Ok(l.iter().zip(&s).map(|(a, b)| a + b).collect()), 0.2, 60).unwrap();
            prop_assert!(h.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn projection_non_expansive(
            l1 in proptest::collection::vec(0.0f64..5.0, 3),
            l2 in proptest::collection::vec(0.0f64..5.0, 3),
            phi_vals in proptest::collection::vec(-5.0f64..5.0, 3),
            tau in 1e-4f64..2.0,
        ) {
            let p1 = projection_update(&l1, &phi_vals, tau).unwrap();
            let p2 = projection_update(&l2, &phi_vals, tau).unwrap();
            let d_out: f64 = p1.iter().zip(&p2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let d_in: f64 = l1.iter().zip(&l2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(d_out <= d_in + 1e-12);
        }
    }
}
