//! Per-user loss functions, gradients and curvature bounds.

use nalgebra::DVector;

use crate::error::{GadmmError, Result};
use crate::model::UserDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// `½‖Xw − y‖²`
    Linear,
    /// `Σ ln(1 + exp(−y_i x_iᵀw))`, labels in {−1, +1}
    Logistic,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Linear => "linear",
            LossKind::Logistic => "logistic",
        }
    }
}

fn check_inputs(w: &DVector<f64>, data: &UserDataset) -> Result<()> {
    if w.len() != data.dim() {
        return Err(GadmmError::invalid(format!(
            "weight length {} does not match feature dimension {}",
            w.len(),
            data.dim()
        )));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(GadmmError::NumericDomain("non-finite weight entry".into()));
    }
    Ok(())
}

/// `ln(1 + e^t)` without overflow.
pub(crate) fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Logistic sigmoid `1 / (1 + e^{−t})`.
pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn loss_value(kind: LossKind, w: &DVector<f64>, data: &UserDataset) -> Result<f64> {
    check_inputs(w, data)?;
    let margins = data.features() * w;
    let value = match kind {
        LossKind::Linear => 0.5 * (margins - data.labels()).norm_squared(),
        LossKind::Logistic => margins
            .iter()
            .zip(data.labels().iter())
            .map(|(m, y)| softplus(-y * m))
            .sum(),
    };
    Ok(value)
}

pub fn loss_gradient(kind: LossKind, w: &DVector<f64>, data: &UserDataset) -> Result<DVector<f64>> {
    check_inputs(w, data)?;
    let margins = data.features() * w;
    let residual = match kind {
        LossKind::Linear => margins - data.labels(),
        LossKind::Logistic => DVector::from_iterator(
            margins.len(),
            margins
                .iter()
                .zip(data.labels().iter())
                .map(|(m, y)| -sigmoid(-y * m) * y),
        ),
    };
    Ok(data.features().tr_mul(&residual))
}

/// `(alpha_min, lipschitz)` for the loss Hessian over the whole domain.
///
/// Linear loss has the constant Hessian `XᵀX`. Logistic loss is bounded
/// below by 0 (not strongly convex) and above by `¼ XᵀX`.
pub fn curvature_bounds(kind: LossKind, data: &UserDataset) -> (f64, f64) {
    let gram = data.features().tr_mul(data.features());
    let eig = gram.symmetric_eigenvalues();
    let min = eig.min().max(0.0);
    let max = eig.max().max(0.0);
    match kind {
        LossKind::Linear => (min, max),
        LossKind::Logistic => (0.0, 0.25 * max),
    }
}
