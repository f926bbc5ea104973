//! Per-user proximal local subproblem and the server-side consensus update.
//!
//! User `n` minimises
//!
//! ```text
//! Φ_n(w; w_{−n}) + μ_n Σ_k g¹_{n,k}(w) + λ_n g²_n(w, z) + ½‖w − w_n^{t−1}‖²
//! ```
//!
//! over the box `[−B, B]^d` with the other users' weights frozen at the
//! previous round. Quadratic instances are solved directly; everything else
//! goes through proximal gradient descent with halving backtracking.

use nalgebra::DVector;

use crate::constraints::{eval_equality, eval_inequality, ConstraintSpec};
use crate::error::{GadmmError, Result};
use crate::losses::{loss_gradient, loss_value, LossKind};
use crate::model::{Problem, SystemState};
use crate::protection::robust_objective;

const MAX_HALVINGS: u32 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LocalMethod {
    /// Direct linear solve when the local objective is quadratic.
    #[default]
    Auto,
    /// Always iterate, even for quadratic objectives.
    Iterative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolverConfig {
    /// Initial step η; `None` uses `1 / L` with `L` the smooth part's Lipschitz constant.
    pub step_size: Option<f64>,
    /// Stop when the gradient-mapping norm drops below this.
    pub inner_tolerance: f64,
    pub inner_max_iters: usize,
    /// Half-width `B` of the iterate box.
    pub box_bound: f64,
    pub method: LocalMethod,
}

impl Default for InnerSolverConfig {
    fn default() -> Self {
        Self {
            step_size: None,
            inner_tolerance: 1e-9,
            inner_max_iters: 5000,
            box_bound: 1e3,
            method: LocalMethod::Auto,
        }
    }
}

impl InnerSolverConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(eta) = self.step_size {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(GadmmError::invalid("inner step size must be > 0"));
            }
        }
        if !(self.inner_tolerance > 0.0) {
            return Err(GadmmError::invalid("inner tolerance must be > 0"));
        }
        if self.inner_max_iters == 0 {
            return Err(GadmmError::invalid("inner_max_iters must be >= 1"));
        }
        if !(self.box_bound > 0.0) {
            return Err(GadmmError::invalid("box bound must be > 0"));
        }
        Ok(())
    }
}

/// Local objective value, including the protection constant.
pub fn local_objective(
    problem: &Problem,
    n: usize,
    w: &DVector<f64>,
    state: &SystemState,
    w_prev_n: &DVector<f64>,
) -> Result<f64> {
    local_objective_with(problem, n, w, state, w_prev_n, state.lambda[n], state.mu[n])
}

fn local_objective_with(
    problem: &Problem,
    n: usize,
    w: &DVector<f64>,
    state: &SystemState,
    w_prev_n: &DVector<f64>,
    lambda_n: f64,
    mu_n: f64,
) -> Result<f64> {
    let data = problem
        .datasets
        .get(n)
        .ok_or_else(|| GadmmError::invalid(format!("user index {n} out of range")))?;
    let z = &state.consensus;
    let phi = robust_objective(problem.loss, &problem.protection, n, w, data, &state.weights)?;
    let eq_sum = eval_equality(&problem.constraint, n, w, z, &state.weights)?.sum();
    let ineq = eval_inequality(&problem.constraint, n, w, z)?;
    Ok(phi + mu_n * eq_sum + lambda_n * ineq + 0.5 * (w - w_prev_n).norm_squared())
}

/// The `w`-dependent part of the local problem split into a smooth term and
/// an optional `λ‖w − z‖₁` term handled through its prox.
struct LocalModel<'a> {
    problem: &'a Problem,
    n: usize,
    state: &'a SystemState,
    w_prev: &'a DVector<f64>,
    lambda: f64,
    mu: f64,
}

impl LocalModel<'_> {
    fn smooth_lambda(&self) -> f64 {
        match self.problem.constraint.soft_order() {
            Some(2) => self.lambda,
            _ => 0.0,
        }
    }

    fn l1_lambda(&self) -> f64 {
        match self.problem.constraint.soft_order() {
            Some(1) => self.lambda,
            _ => 0.0,
        }
    }

    fn smooth_value(&self, w: &DVector<f64>) -> Result<f64> {
        let z = &self.state.consensus;
        let data = &self.problem.datasets[self.n];
        let mut v = loss_value(self.problem.loss, w, data)? + 0.5 * (w - self.w_prev).norm_squared();
        let c = &self.problem.constraint;
        v += self.mu * eval_equality(c, self.n, w, z, &self.state.weights)?.sum();
        let lam2 = self.smooth_lambda();
        if lam2 != 0.0 {
            v += lam2 * eval_inequality(c, self.n, w, z)?;
        }
        Ok(v)
    }

    fn smooth_gradient(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        let data = &self.problem.datasets[self.n];
        let mut g = loss_gradient(self.problem.loss, w, data)?;
        g += w - self.w_prev;
        let slope = self.mu * self.problem.constraint.equality_sum_slope(self.n);
        if slope != 0.0 {
            g.add_scalar_mut(slope);
        }
        let lam2 = self.smooth_lambda();
        if lam2 != 0.0 {
            g += (w - &self.state.consensus) * (2.0 * lam2);
        }
        Ok(g)
    }

    #[cfg(test)]
    fn nonsmooth_value(&self, w: &DVector<f64>) -> f64 {
        let lam1 = self.l1_lambda();
        if lam1 == 0.0 {
            return 0.0;
        }
        let l1: f64 = w.iter().zip(self.state.consensus.iter()).map(|(a, b)| (a - b).abs()).sum();
        lam1 * l1
    }

    /// Prox of `η·λ‖· − z‖₁` plus the box indicator, coordinate-wise.
    fn prox(&self, v: &DVector<f64>, eta: f64, bound: f64) -> DVector<f64> {
        let shrink = eta * self.l1_lambda();
        DVector::from_fn(v.len(), |k, _| {
            let u = if shrink > 0.0 {
                let zk = self.state.consensus[k];
                let r = v[k] - zk;
                zk + r.signum() * (r.abs() - shrink).max(0.0)
            } else {
                v[k]
            };
            u.clamp(-bound, bound)
        })
    }

    fn lipschitz(&self) -> f64 {
        self.problem.curvature(self.n).1 + 1.0 + 2.0 * self.smooth_lambda()
    }

    fn is_quadratic(&self) -> bool {
        self.problem.loss == LossKind::Linear && self.l1_lambda() == 0.0
    }

    /// `(XᵀX + (1 + 2λ)I) w = Xᵀy + w_prev − μ c 1 + 2λ z`
    fn closed_form(&self) -> Option<DVector<f64>> {
        let lam2 = self.smooth_lambda();
        let d = self.problem.dim();
        let mut a = self.problem.gram[self.n].clone();
        for k in 0..d {
            a[(k, k)] += 1.0 + 2.0 * lam2;
        }
        let mut b = &self.problem.xty[self.n] + self.w_prev;
        b.add_scalar_mut(-self.mu * self.problem.constraint.equality_sum_slope(self.n));
        if lam2 != 0.0 {
            b += &self.state.consensus * (2.0 * lam2);
        }
        a.cholesky().map(|ch| ch.solve(&b))
    }
}

/// Approximate minimiser of user `n`'s local objective.
pub fn solve_local(
    problem: &Problem,
    n: usize,
    state: &SystemState,
    w_prev_n: &DVector<f64>,
    config: &InnerSolverConfig,
) -> Result<DVector<f64>> {
    solve_local_with(problem, n, state, w_prev_n, state.lambda[n], state.mu[n], config)
}

/// As [`solve_local`] with the multipliers of user `n` overridden.
pub fn solve_local_with(
    problem: &Problem,
    n: usize,
    state: &SystemState,
    w_prev_n: &DVector<f64>,
    lambda_n: f64,
    mu_n: f64,
    config: &InnerSolverConfig,
) -> Result<DVector<f64>> {
    if n >= problem.n_users() {
        return Err(GadmmError::invalid(format!("user index {n} out of range")));
    }
    if w_prev_n.len() != problem.dim() || state.dim() != problem.dim() {
        return Err(GadmmError::invalid("state dimension does not match the problem"));
    }
    let model = LocalModel { problem, n, state, w_prev: w_prev_n, lambda: lambda_n, mu: mu_n };
    let bound = config.box_bound;

    if config.method == LocalMethod::Auto && model.is_quadratic() {
        if let Some(w) = model.closed_form() {
            if w.iter().all(|v| v.is_finite() && v.abs() <= bound) {
                return Ok(w);
            }
        }
    }

    let start = w_prev_n.map(|v| v.clamp(-bound, bound));
    let start_value = model.smooth_value(&start)?;
    if !start_value.is_finite() {
        return Err(GadmmError::NumericDomain(format!("local objective of user {n} is not finite")));
    }
    let mut eta = config.step_size.unwrap_or_else(|| 1.0 / model.lipschitz());
    let mut x = start;
    let mut fx = start_value;
    for _ in 0..config.inner_max_iters {
        let g = model.smooth_gradient(&x)?;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = model.prox(&(&x - &g * eta), eta, bound);
            let step = &cand - &x;
            let fc = model.smooth_value(&cand)?;
            let model_bound = fx + g.dot(&step) + step.norm_squared() / (2.0 * eta);
            if fc.is_finite() && fc <= model_bound + 1e-12 * fx.abs().max(1.0) {
                accepted = Some((cand, fc, step.norm()));
                break;
            }
            eta *= 0.5;
        }
        let (cand, fc, step_norm) =
            accepted.ok_or(GadmmError::InnerDivergence { user: n, round: state.iteration })?;
        x = cand;
        fx = fc;
        if step_norm / eta <= config.inner_tolerance {
            break;
        }
    }
    Ok(x)
}

/// Total local objective seen by the line search (protection excluded since it
/// does not depend on `w_n`).
#[cfg(test)]
fn searched_objective(problem: &Problem, n: usize, w: &DVector<f64>, state: &SystemState, w_prev: &DVector<f64>) -> f64 {
    let model = LocalModel { problem, n, state, w_prev, lambda: state.lambda[n], mu: state.mu[n] };
    model.smooth_value(w).unwrap() + model.nonsmooth_value(w)
}

/// Server-side consensus update.
///
/// Classical: the plain average. Soft norm: the proximal minimiser of
/// `Σ_n λ_n ‖w_n − z‖_p^p + ½‖z − z^{t−1}‖²`. Group: `z` is unused and
/// returned unchanged.
pub fn update_z(state: &SystemState, constraint: &ConstraintSpec) -> DVector<f64> {
    let n = state.n_users() as f64;
    match constraint {
        ConstraintSpec::Classical => {
            let mut sum = DVector::zeros(state.dim());
            for w in &state.weights {
                sum += w;
            }
            sum / n
        }
        ConstraintSpec::SoftNorm { p: 2, .. } => {
            let total: f64 = state.lambda.iter().sum();
            let mut num = state.consensus.clone();
            for (w, &l) in state.weights.iter().zip(&state.lambda) {
                num += w * (2.0 * l);
            }
            num / (1.0 + 2.0 * total)
        }
        ConstraintSpec::SoftNorm { .. } => DVector::from_fn(state.dim(), |k, _| {
            let points: Vec<(f64, f64)> = state.weights.iter().zip(&state.lambda).map(|(w, &l)| (w[k], l)).collect();
            weighted_l1_prox(state.consensus[k], &points)
        }),
        ConstraintSpec::Group { .. } => state.consensus.clone(),
    }
}

/// `argmin_t ½(t − c)² + Σ λ_i |t − a_i|` by bisection on the monotone
/// subgradient.
fn weighted_l1_prox(c: f64, points: &[(f64, f64)]) -> f64 {
    let total: f64 = points.iter().map(|p| p.1).sum();
    if total == 0.0 {
        return c;
    }
    let psi = |t: f64| t - c + points.iter().map(|&(a, l)| l * (t - a).signum() * f64::from(t != a)).sum::<f64>();
    let (mut lo, mut hi) = (c - total - 1e-12, c + total + 1e-12);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if psi(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
