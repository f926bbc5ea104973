//! Worst-case protection terms.
//!
//! The inner maximisation over the bounded linear uncertainty region is
//! replaced by its closed-form surrogate `ς_n Σ_{m≠n} ‖w_m‖² + δ_n`. The
//! surrogate depends only on the other users' weights.

use nalgebra::DVector;

use crate::error::{GadmmError, Result};
use crate::losses::{loss_value, LossKind};
use crate::model::UserDataset;

#[derive(Debug, Clone, PartialEq, Default)]
pub enum ProtectionSpec {
    #[default]
    None,
    L2 { varsigma: Vec<f64>, delta: Vec<f64> },
}

impl ProtectionSpec {
    pub fn uniform(varsigma: f64, delta: f64, n_users: usize) -> Self {
        ProtectionSpec::L2 { varsigma: vec![varsigma; n_users], delta: vec![delta; n_users] }
    }

    pub fn validate(&self, n_users: usize) -> Result<()> {
        if let ProtectionSpec::L2 { varsigma, delta } = self {
            if varsigma.len() != n_users || delta.len() != n_users {
                return Err(GadmmError::invalid("protection parameters need one entry per user"));
            }
            if varsigma.iter().chain(delta).any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(GadmmError::invalid("varsigma and delta must be finite and >= 0"));
            }
        }
        Ok(())
    }

    pub fn varsigma(&self, n: usize) -> f64 {
        match self {
            ProtectionSpec::None => 0.0,
            ProtectionSpec::L2 { varsigma, .. } => varsigma[n],
        }
    }
}

pub fn protection_value(spec: &ProtectionSpec, n: usize, all_weights: &[DVector<f64>]) -> Result<f64> {
    if n >= all_weights.len() {
        return Err(GadmmError::invalid(format!("user index {n} out of range")));
    }
    match spec {
        ProtectionSpec::None => Ok(0.0),
        ProtectionSpec::L2 { varsigma, delta } => {
            let others: f64 = all_weights
                .iter()
                .enumerate()
                .filter(|(m, _)| *m != n)
                .map(|(_, w)| w.norm_squared())
                .sum();
            Ok(varsigma[n] * others + delta[n])
        }
    }
}

/// Gradient of user `n`'s protection term with respect to `w_m`.
pub fn protection_gradient(spec: &ProtectionSpec, n: usize, m: usize, w_m: &DVector<f64>) -> DVector<f64> {
    if m == n {
        return DVector::zeros(w_m.len());
    }
    w_m * (2.0 * spec.varsigma(n))
}

/// Worst-case objective `Φ_n = V_n(w_n) + protection_n(w_{−n})`.
///
/// `all_weights[n]` is ignored; `w_n` supplies user `n`'s own weights.
pub fn robust_objective(
    kind: LossKind,
    spec: &ProtectionSpec,
    n: usize,
    w_n: &DVector<f64>,
    data_n: &UserDataset,
    all_weights: &[DVector<f64>],
) -> Result<f64> {
    Ok(loss_value(kind, w_n, data_n)? + protection_value(spec, n, all_weights)?)
}

/// Per-coordinate curvature `2ς_n` of user `n`'s protection in any `w_m`,
/// used as the off-diagonal coupling bound in the Υ matrix.
pub fn protection_cross_coupling(spec: &ProtectionSpec, n: usize) -> f64 {
    2.0 * spec.varsigma(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::generate_synthetic;
    use proptest::prelude::*;

    fn weights(rows: &[&[f64]]) -> Vec<DVector<f64>> {
        rows.iter().map(|r| DVector::from_row_slice(r)).collect()
    }

    #[test]
    fn zero_others_gives_delta() {
        let spec = ProtectionSpec::uniform(0.3, 0.1, 3);
        let w = weights(&[&[5.0, 5.0], &[0.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(protection_value(&spec, 0, &w).unwrap(), 0.1);
    }

    #[test]
    fn experiment_settings_example() {
        let spec = ProtectionSpec::uniform(5e-3, 0.1, 3);
        // Σ‖w_{−n}‖² = 4
        let w = weights(&[&[9.0, 9.0], &[2.0, 0.0], &[0.0, 0.0]]);
        assert!((protection_value(&spec, 0, &w).unwrap() - 0.12).abs() < 1e-15);
    }

    #[test]
    fn none_is_zero() {
        let w = weights(&[&[1.0], &[7.0]]);
        assert_eq!(protection_value(&ProtectionSpec::None, 1, &w).unwrap(), 0.0);
        assert!(protection_value(&ProtectionSpec::None, 2, &w).is_err());
    }

    #[test]
    fn robust_objective_components() {
        let data = generate_synthetic(4, 2, 6, 3, 0.2, LossKind::Linear).unwrap();
        let w = weights(&[&[0.1, 0.2, 0.3], &[-1.0, 0.5, 2.0]]);
        let ds = &data.datasets[0];
        let plain = robust_objective(LossKind::Linear, &ProtectionSpec::None, 0, &w[0], ds, &w).unwrap();
        assert_eq!(plain, loss_value(LossKind::Linear, &w[0], ds).unwrap());

        let spec = ProtectionSpec::uniform(0.01, 0.1, 2);
        let zero_others = weights(&[&[0.1, 0.2, 0.3], &[0.0, 0.0, 0.0]]);
        let v = robust_objective(LossKind::Linear, &spec, 0, &w[0], ds, &zero_others).unwrap();
        assert!((v - (plain + 0.1)).abs() < 1e-12);

        // independent sum of sub-oracles
        let loss: f64 = (0..ds.n_samples())
            .map(|i| {
                let r = (0..3).map(|j| ds.features()[(i, j)] * w[0][j]).sum::<f64>() - ds.labels()[i];
                0.5 * r * r
            })
            .sum();
        let prot = 0.01 * (1.0 + 0.25 + 4.0) + 0.1;
        let got = robust_objective(LossKind::Linear, &spec, 0, &w[0], ds, &w).unwrap();
        assert!((got - (loss + prot)).abs() < 1e-12);
    }

    #[test]
    fn coupling_closed_form() {
        assert_eq!(protection_cross_coupling(&ProtectionSpec::uniform(0.0, 0.1, 2), 0), 0.0);
        assert!((protection_cross_coupling(&ProtectionSpec::uniform(1e-3, 0.1, 2), 1) - 2e-3).abs() < 1e-18);
        assert_eq!(protection_cross_coupling(&ProtectionSpec::None, 0), 0.0);
    }

    #[test]
    fn coupling_matches_second_difference() {
        let spec = ProtectionSpec::uniform(1e-3, 0.1, 3);
        let base = weights(&[&[0.3, 0.1], &[1.5, -0.7], &[0.2, 2.0]]);
        let h = 1e-3;
        for coord in 0..2 {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[2][coord] += h;
            minus[2][coord] -= h;
            let f = |w: &[DVector<f64>]| protection_value(&spec, 0, w).unwrap();
            let second = (f(&plus) - 2.0 * f(&base) + f(&minus)) / (h * h);
            let analytic = protection_cross_coupling(&spec, 0);
            assert!((second - analytic).abs() / analytic < 1e-4, "{second} vs {analytic}");
        }
    }

    proptest! {
        #[test]
        fn independent_of_own_weights(
            own in proptest::collection::vec(-5.0f64..5.0, 2),
            other in proptest::collection::vec(-5.0f64..5.0, 2),
        ) {
            let spec = ProtectionSpec::uniform(0.2, 0.1, 2);
            let a = vec![DVector::from_vec(own), DVector::from_vec(other.clone())];
            let b = vec![DVector::from_vec(vec![0.0, 0.0]), DVector::from_vec(other)];
            prop_assert_eq!(protection_value(&spec, 0, &a).unwrap(), protection_value(&spec, 0, &b).unwrap());
        }

        #[test]
        fn monotone_in_varsigma_and_norm(
            s in 0.0f64..1.0,
            bump in 0.0f64..1.0,
            scale in 1.0f64..3.0,
            other in proptest::collection::vec(-5.0f64..5.0, 2),
        ) {
            let w = vec![DVector::zeros(2), DVector::from_vec(other)];
            let lo = protection_value(&ProtectionSpec::uniform(s, 0.1, 2), 0, &w).unwrap();
            let hi = protection_value(&ProtectionSpec::uniform(s + bump, 0.1, 2), 0, &w).unwrap();
            prop_assert!(hi >= lo);
            let scaled = vec![w[0].clone(), &w[1] * scale];
            let bigger = protection_value(&ProtectionSpec::uniform(s, 0.1, 2), 0, &scaled).unwrap();
            prop_assert!(bigger >= lo);
        }

        #[test]
        fn worst_case_never_helps(
            own in proptest::collection::vec(-2.0f64..2.0, 3),
            other in proptest::collection::vec(-2.0f64..2.0, 3),
            s in 0.0f64..0.1,
            delta in 0.0f64..1.0,
        ) {
            let data = generate_synthetic(9, 2, 5, 3, 0.1, LossKind::Logistic).unwrap();
            let w = vec![DVector::from_vec(own), DVector::from_vec(other)];
            let spec = ProtectionSpec::uniform(s, delta, 2);
            let robust = robust_objective(LossKind::Logistic, &spec, 0, &w[0], &data.datasets[0], &w).unwrap();
            prop_assert!(robust >= loss_value(LossKind::Logistic, &w[0], &data.datasets[0]).unwrap());
        }
    }
}
