//! Consensus coupling: the equality part `g¹`, the inequality part `g²`,
//! their gradients, and the linear-constraint matrices used for the
//! skew-symmetric splitting of the VI map.

use nalgebra::{DMatrix, DVector};

use crate::error::{GadmmError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintSpec {
    /// `w_n = z`
    Classical,
    /// `‖w_n − z‖_p^p ≤ ε_n`, p ∈ {1, 2}
    SoftNorm { p: u32, epsilon: Vec<f64> },
    /// `w_n = w_m` for every neighbour `m ∈ A_n`; no server variable.
    Group { adjacency: Vec<Vec<usize>> },
}

impl ConstraintSpec {
    pub fn soft_norm(p: u32, epsilon: f64, n_users: usize) -> Self {
        ConstraintSpec::SoftNorm { p, epsilon: vec![epsilon; n_users] }
    }

    /// Path graph 0 – 1 – … – (n−1).
    pub fn chain(n_users: usize) -> Self {
        let adjacency = (0..n_users)
            .map(|n| {
                let mut nb = Vec::new();
                if n > 0 {
                    nb.push(n - 1);
                }
                if n + 1 < n_users {
                    nb.push(n + 1);
                }
                nb
            })
            .collect();
        ConstraintSpec::Group { adjacency }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConstraintSpec::Classical => "classical",
            ConstraintSpec::SoftNorm { .. } => "soft_norm",
            ConstraintSpec::Group { .. } => "group",
        }
    }

    /// Whether the run loop maintains a server-side consensus variable.
    pub fn uses_server(&self) -> bool {
        !matches!(self, ConstraintSpec::Group { .. })
    }

    pub fn validate(&self, n_users: usize) -> Result<()> {
        match self {
            ConstraintSpec::Classical => Ok(()),
            ConstraintSpec::SoftNorm { p, epsilon } => {
                if *p != 1 && *p != 2 {
                    return Err(GadmmError::invalid(format!("soft-norm order p = {p} unsupported (1 or 2)")));
                }
                if epsilon.len() != n_users {
                    return Err(GadmmError::invalid(format!(
                        "epsilon has {} entries for {n_users} users",
                        epsilon.len()
                    )));
                }
                if epsilon.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
                    return Err(GadmmError::invalid("epsilon entries must be finite and >= 0"));
                }
                Ok(())
            }
            ConstraintSpec::Group { adjacency } => {
                if adjacency.len() != n_users {
                    return Err(GadmmError::invalid("adjacency must list neighbours for every user"));
                }
                for (n, nb) in adjacency.iter().enumerate() {
                    for &m in nb {
                        if m >= n_users {
                            return Err(GadmmError::invalid(format!("neighbour {m} of user {n} out of range")));
                        }
                        if m == n {
                            return Err(GadmmError::invalid(format!("user {n} lists itself as a neighbour")));
                        }
                        if !adjacency[m].contains(&n) {
                            return Err(GadmmError::invalid(format!("adjacency not symmetric for edge {n}-{m}")));
                        }
                    }
                }
                Ok(())
            }
        }
    }

    /// `c` such that `∇_{w_n} Σ_k g¹_{n,k} = c·1`.
    pub fn equality_sum_slope(&self, n: usize) -> f64 {
        match self {
            ConstraintSpec::Classical => 1.0,
            ConstraintSpec::SoftNorm { .. } => 0.0,
            ConstraintSpec::Group { adjacency } => adjacency[n].len() as f64,
        }
    }

    pub(crate) fn soft_order(&self) -> Option<u32> {
        match self {
            ConstraintSpec::SoftNorm { p, .. } => Some(*p),
            _ => None,
        }
    }
}

fn check_user(n: usize, count: usize) -> Result<()> {
    if n >= count {
        return Err(GadmmError::invalid(format!("user index {n} out of range ({count} users)")));
    }
    Ok(())
}

/// Equality residual `g¹_n`: `w_n − z` (classical), the concatenation of
/// `w_n − w_m` over neighbours (group), or empty (soft norm).
pub fn eval_equality(
    spec: &ConstraintSpec,
    n: usize,
    w_n: &DVector<f64>,
    z: &DVector<f64>,
    all_weights: &[DVector<f64>],
) -> Result<DVector<f64>> {
    check_user(n, all_weights.len())?;
    if w_n.len() != z.len() {
        return Err(GadmmError::invalid("weight and consensus dimensions differ"));
    }
    match spec {
        ConstraintSpec::Classical => Ok(w_n - z),
        ConstraintSpec::SoftNorm { .. } => Ok(DVector::zeros(0)),
        ConstraintSpec::Group { adjacency } => {
            let d = w_n.len();
            let nb = adjacency
                .get(n)
                .ok_or_else(|| GadmmError::invalid(format!("user {n} missing from adjacency")))?;
            let mut out = DVector::zeros(d * nb.len());
            for (slot, &m) in nb.iter().enumerate() {
                let other = all_weights
                    .get(m)
                    .ok_or_else(|| GadmmError::invalid(format!("neighbour {m} out of range")))?;
                out.rows_mut(slot * d, d).copy_from(&(w_n - other));
            }
            Ok(out)
        }
    }
}

/// Inequality residual `g²_n` in the `≤ 0` orientation.
pub fn eval_inequality(spec: &ConstraintSpec, n: usize, w_n: &DVector<f64>, z: &DVector<f64>) -> Result<f64> {
    match spec {
        ConstraintSpec::SoftNorm { p, epsilon } => {
            let eps = *epsilon
                .get(n)
                .ok_or_else(|| GadmmError::invalid(format!("user index {n} out of range")))?;
            if w_n.len() != z.len() {
                return Err(GadmmError::invalid("weight and consensus dimensions differ"));
            }
            let diff = w_n - z;
            let norm_p = match p {
                1 => diff.iter().map(|v| v.abs()).sum::<f64>(),
                2 => diff.norm_squared(),
                other => return Err(GadmmError::invalid(format!("soft-norm order p = {other} unsupported"))),
            };
            Ok(norm_p - eps)
        }
        _ => Ok(0.0),
    }
}

/// `(∇_{w_n} g², ∇_z g²)`. For `p = 1` the subgradient uses `sign(0) = 0`.
pub fn grad_inequality(
    spec: &ConstraintSpec,
    n: usize,
    w_n: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let d = w_n.len();
    match spec {
        ConstraintSpec::SoftNorm { p, epsilon } => {
            if n >= epsilon.len() {
                return Err(GadmmError::invalid(format!("user index {n} out of range")));
            }
            let diff = w_n - z;
            let g = match p {
                1 => diff.map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }),
                2 => diff * 2.0,
                other => return Err(GadmmError::invalid(format!("soft-norm order p = {other} unsupported"))),
            };
            let neg = -&g;
            Ok((g, neg))
        }
        _ => Ok((DVector::zeros(d), DVector::zeros(d))),
    }
}

/// Sign of the off-diagonal entries of the classical consensus matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClassicalSign {
    /// Off-diagonal `+1/N`, as the matrix is usually printed.
    #[default]
    Printed,
    /// Off-diagonal `−1/N`, the consensus projector `I − 11ᵀ/N`.
    Corrected,
}

/// Linear-constraint data `g¹ = d − Cw`, `g² = b − Aw` and the skew-symmetric
/// block `M₂` of the VI splitting `M = M₁ + M₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraintMatrices {
    pub c: DMatrix<f64>,
    pub d_vec: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b_vec: DVector<f64>,
    pub m2: DMatrix<f64>,
}

impl LinearConstraintMatrices {
    /// `C ⊗ I_d`: the per-user matrix acting on stacked weight vectors.
    pub fn expanded_c(&self, dim: usize) -> DMatrix<f64> {
        self.c.kronecker(&DMatrix::identity(dim, dim))
    }

    /// `M = M₁ + M₂` with `M₁ = diag(jacobian, 0, 0)`.
    pub fn assemble_m(&self, jacobian: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.c.ncols();
        if jacobian.nrows() != n || jacobian.ncols() != n {
            return Err(GadmmError::invalid("jacobian block must be N x N"));
        }
        let mut m = self.m2.clone();
        let mut block = m.view_mut((0, 0), (n, n));
        block += jacobian;
        Ok(m)
    }

    pub fn is_skew_symmetric(&self) -> bool {
        let sum = &self.m2 + self.m2.transpose();
        sum.iter().all(|&v| v == 0.0)
    }
}

pub fn build_linear_matrices(
    spec: &ConstraintSpec,
    n_users: usize,
    sign: ClassicalSign,
) -> Result<LinearConstraintMatrices> {
    if n_users == 0 {
        return Err(GadmmError::invalid("need at least one user"));
    }
    let nf = n_users as f64;
    let c = match spec {
        ConstraintSpec::Classical => {
            let off = match sign {
                ClassicalSign::Printed => 1.0 / nf,
                ClassicalSign::Corrected => -1.0 / nf,
            };
            DMatrix::from_fn(n_users, n_users, |i, j| if i == j { 1.0 - 1.0 / nf } else { off })
        }
        ConstraintSpec::Group { adjacency } => {
            spec.validate(n_users)?;
            DMatrix::from_fn(n_users, n_users, |i, j| {
                if i == j {
                    1.0
                } else if adjacency[i].contains(&j) {
                    -1.0
                } else {
                    0.0
                }
            })
        }
        ConstraintSpec::SoftNorm { .. } => return Err(GadmmError::UnsupportedVariant("linear matrices")),
    };
    let rows = c.nrows();
    let a = DMatrix::zeros(0, n_users);
    let total = n_users + rows + a.nrows();
    let mut m2 = DMatrix::zeros(total, total);
    m2.view_mut((0, n_users), (n_users, rows)).copy_from(&c.transpose());
    m2.view_mut((n_users, 0), (rows, n_users)).copy_from(&(-&c));
    if a.nrows() > 0 {
        m2.view_mut((0, n_users + rows), (n_users, a.nrows())).copy_from(&a.transpose());
        m2.view_mut((n_users + rows, 0), (a.nrows(), n_users)).copy_from(&(-&a));
    }
    Ok(LinearConstraintMatrices { c, d_vec: DVector::zeros(rows), a, b_vec: DVector::zeros(0), m2 })
}
