//! Centralized counterpart `min_w Σ_n V_n(w)` and the Δ error metric.

use nalgebra::{DMatrix, DVector};

use crate::error::{GadmmError, Result};
use crate::losses::{loss_gradient, loss_value, LossKind};
use crate::model::{SystemState, UserDataset};

const RIDGE: f64 = 1e-10;
const DENOM_FLOOR: f64 = 1e-12;

fn check_datasets(datasets: &[UserDataset]) -> Result<usize> {
    let first = datasets.first().ok_or_else(|| GadmmError::invalid("no datasets"))?;
    let d = first.dim();
    if datasets.iter().any(|ds| ds.dim() != d) {
        return Err(GadmmError::invalid("all datasets must share the feature dimension"));
    }
    Ok(d)
}

/// Sum of all users' losses.
pub fn centralized_objective(kind: LossKind, datasets: &[UserDataset], w: &DVector<f64>) -> Result<f64> {
    datasets.iter().map(|ds| loss_value(kind, w, ds)).sum()
}

fn centralized_gradient(kind: LossKind, datasets: &[UserDataset], w: &DVector<f64>) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(w.len());
    for ds in datasets {
        g += loss_gradient(kind, w, ds)?;
    }
    Ok(g)
}

/// Minimiser of the pooled objective.
///
/// Linear loss solves the stacked normal equations (ridge `1e−10` when the
/// Gram matrix is singular). Logistic loss runs gradient descent with step
/// `1/L`, `L = ¼ λ_max(Σ XᵀX)`, until the gradient norm drops to `tolerance`.
pub fn solve_centralized(
    kind: LossKind,
    datasets: &[UserDataset],
    tolerance: f64,
    max_iters: usize,
) -> Result<DVector<f64>> {
    let d = check_datasets(datasets)?;
    let mut gram = DMatrix::zeros(d, d);
    let mut xty = DVector::zeros(d);
    for ds in datasets {
        gram += ds.features().tr_mul(ds.features());
        xty += ds.features().tr_mul(ds.labels());
    }
    match kind {
        LossKind::Linear => {
            if let Some(ch) = gram.clone().cholesky() {
                return Ok(ch.solve(&xty));
            }
            let ridged = &gram + DMatrix::identity(d, d) * RIDGE;
            if let Some(ch) = ridged.clone().cholesky() {
                return Ok(ch.solve(&xty));
            }
            ridged
                .svd(true, true)
                .solve(&xty, 1e-14)
                .map_err(|e| GadmmError::NumericDomain(format!("normal equations: {e}")))
        }
        LossKind::Logistic => {
            let lipschitz = 0.25 * gram.symmetric_eigenvalues().max();
            if lipschitz <= 0.0 {
                return Ok(DVector::zeros(d));
            }
            let step = 1.0 / lipschitz;
            let mut w = DVector::zeros(d);
            let mut g = centralized_gradient(kind, datasets, &w)?;
            for _ in 0..max_iters {
                if g.norm() <= tolerance {
                    return Ok(w);
                }
                w -= &g * step;
                g = centralized_gradient(kind, datasets, &w)?;
            }
            if g.norm() <= tolerance {
                return Ok(w);
            }
            Err(GadmmError::NotConverged { iterations: max_iters, grad_norm: g.norm(), best: w.iter().copied().collect() })
        }
    }
}

/// Distance between a distributed state and the centralized solution `w*`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Delta {
    /// `(1/N) Σ_n ‖w_n − w*‖ / max(‖w*‖, 1e−12)`
    pub param: f64,
    /// `(F(w̄) − F(w*)) / max(|F(w*)|, 1e−12)` with `w̄` the user mean.
    pub objective: f64,
}

pub fn compute_delta(
    state: &SystemState,
    w_star: &DVector<f64>,
    kind: LossKind,
    datasets: &[UserDataset],
) -> Result<Delta> {
    if state.n_users() == 0 {
        return Err(GadmmError::invalid("state has no users"));
    }
    if state.weights.iter().any(|w| w.len() != w_star.len()) {
        return Err(GadmmError::invalid("weight and reference dimensions differ"));
    }
    let n = state.n_users() as f64;
    let denom = w_star.norm().max(DENOM_FLOOR);
    let param = state.weights.iter().map(|w| (w - w_star).norm()).sum::<f64>() / n / denom;
    let mut mean = DVector::zeros(w_star.len());
    for w in &state.weights {
        mean += w;
    }
    mean /= n;
    let f_star = centralized_objective(kind, datasets, w_star)?;
    let f_mean = centralized_objective(kind, datasets, &mean)?;
    let objective = (f_mean - f_star) / f_star.abs().max(DENOM_FLOOR);
    Ok(Delta { param, objective })
}
