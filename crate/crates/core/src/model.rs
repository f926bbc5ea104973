//! Shared domain types, synthetic data generation and run configuration.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::constraints::ConstraintSpec;
use crate::error::{GadmmError, Result};
use crate::losses::{curvature_bounds, LossKind};
use crate::multipliers::MultiplierScheme;
use crate::par::Execution;
use crate::prox::InnerSolverConfig;
use crate::protection::ProtectionSpec;

/// One user's local feature matrix (rows are samples) and label vector.
#[derive(Debug, Clone, PartialEq)]
pub struct UserDataset {
    features: DMatrix<f64>,
    labels: DVector<f64>,
}

impl UserDataset {
    pub fn new(features: DMatrix<f64>, labels: DVector<f64>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(GadmmError::invalid(format!(
                "feature rows ({}) must equal label count ({})",
                features.nrows(),
                labels.len()
            )));
        }
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(GadmmError::invalid("dataset must have at least one sample and one feature"));
        }
        if features.iter().chain(labels.iter()).any(|v| !v.is_finite()) {
            return Err(GadmmError::NumericDomain("dataset contains non-finite entries".into()));
        }
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &DVector<f64> {
        &self.labels
    }

    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Learning task used by the synthetic generator; mirrors [`LossKind`].
pub type Task = LossKind;

/// Output of [`generate_synthetic`]: the per-user datasets plus the recorded
/// ground truth and noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub datasets: Vec<UserDataset>,
    pub ground_truth: DVector<f64>,
    pub noise_std: f64,
}

/// Deterministic synthetic regression/classification data.
///
/// The ground-truth weights and every feature are standard normal draws from a
/// ChaCha8 stream seeded with `seed`. Linear labels are `Xw* + noise`;
/// logistic labels are the sign of the same quantity, with `sign(0) = +1`.
pub fn generate_synthetic(
    seed: u64,
    n_users: usize,
    samples_per_user: usize,
    dim: usize,
    noise_std: f64,
    task: Task,
) -> Result<SyntheticData> {
    if n_users == 0 || samples_per_user == 0 || dim == 0 {
        return Err(GadmmError::invalid("n_users, samples_per_user and dim must all be >= 1"));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(GadmmError::invalid("noise_std must be a finite non-negative real"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    let ground_truth = DVector::from_fn(dim, |_, _| normal());
    let mut datasets = Vec::with_capacity(n_users);
    for _ in 0..n_users {
        // row-major fill so the stream order does not depend on storage layout
        let mut rows = Vec::with_capacity(samples_per_user * dim);
        for _ in 0..samples_per_user * dim {
            rows.push(normal());
        }
        let features = DMatrix::from_row_slice(samples_per_user, dim, &rows);
        let clean = &features * &ground_truth;
        let labels = DVector::from_fn(samples_per_user, |i, _| {
            let noisy = clean[i] + noise_std * normal();
            match task {
                LossKind::Linear => noisy,
                LossKind::Logistic => {
                    if noisy >= 0.0 {
                        1.0
                    } else {
                        -1.0
                    }
                }
            }
        });
        datasets.push(UserDataset::new(features, labels)?);
    }
    Ok(SyntheticData { datasets, ground_truth, noise_std })
}

/// All primal and dual variables of the distributed system at one round.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub weights: Vec<DVector<f64>>,
    pub consensus: DVector<f64>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub iteration: usize,
}

impl SystemState {
    pub fn n_users(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.consensus.len()
    }

    /// Checks the structural invariants: shared dimension, finiteness, `λ >= 0`.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let n = self.n_users();
        if self.lambda.len() != n || self.mu.len() != n {
            return Err(GadmmError::invalid("multiplier vectors must have one entry per user"));
        }
        if self.weights.iter().any(|w| w.len() != d) {
            return Err(GadmmError::invalid("all weight vectors must share the consensus dimension"));
        }
        let finite = self
            .weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.consensus.iter())
            .chain(self.lambda.iter())
            .chain(self.mu.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(GadmmError::NumericDomain("state contains non-finite values".into()));
        }
        if self.lambda.iter().any(|&l| l < 0.0) {
            return Err(GadmmError::invalid("lambda must be non-negative"));
        }
        Ok(())
    }
}

/// Zero weights and consensus; multipliers from the scheme (constants for the
/// fixed scheme, zero otherwise).
pub fn init_state(config: &RunConfig, dim: usize) -> SystemState {
    let n = config.n_users;
    let (lambda0, mu0) = match config.scheme {
        MultiplierScheme::Fixed { lambda0, mu0 } => (lambda0, mu0),
        _ => (0.0, 0.0),
    };
    SystemState {
        weights: vec![DVector::zeros(dim); n],
        consensus: DVector::zeros(dim),
        lambda: vec![lambda0; n],
        mu: vec![mu0; n],
        iteration: 0,
    }
}

/// Euclidean norm of the stacked difference of all user weights (`z` excluded).
pub fn state_distance(a: &SystemState, b: &SystemState) -> Result<f64> {
    if a.n_users() != b.n_users() {
        return Err(GadmmError::invalid("states have different user counts"));
    }
    let mut sq = 0.0;
    for (wa, wb) in a.weights.iter().zip(&b.weights) {
        if wa.len() != wb.len() {
            return Err(GadmmError::invalid("weight dimension mismatch"));
        }
        sq += (wa - wb).norm_squared();
    }
    Ok(sq.sqrt())
}

/// A fully specified learning problem: data, loss and coupling terms.
///
/// Per-user Gram matrices and curvature bounds are computed once here because
/// every round of the solver needs them.
#[derive(Debug, Clone)]
pub struct Problem {
    pub loss: LossKind,
    pub datasets: Vec<UserDataset>,
    pub constraint: ConstraintSpec,
    pub protection: ProtectionSpec,
    pub(crate) gram: Vec<DMatrix<f64>>,
    pub(crate) xty: Vec<DVector<f64>>,
    pub(crate) curvature: Vec<(f64, f64)>,
}

impl Problem {
    pub fn new(
        loss: LossKind,
        datasets: Vec<UserDataset>,
        constraint: ConstraintSpec,
        protection: ProtectionSpec,
    ) -> Result<Self> {
        let n = datasets.len();
        if n == 0 {
            return Err(GadmmError::invalid("problem needs at least one user"));
        }
        let d = datasets[0].dim();
        if datasets.iter().any(|ds| ds.dim() != d) {
            return Err(GadmmError::invalid("all datasets must share the feature dimension"));
        }
        constraint.validate(n)?;
        protection.validate(n)?;
        let gram = datasets.iter().map(|ds| ds.features().tr_mul(ds.features())).collect();
        let xty = datasets.iter().map(|ds| ds.features().tr_mul(ds.labels())).collect();
        let curvature = datasets.iter().map(|ds| curvature_bounds(loss, ds)).collect();
        Ok(Self { loss, datasets, constraint, protection, gram, xty, curvature })
    }

    pub fn n_users(&self) -> usize {
        self.datasets.len()
    }

    pub fn dim(&self) -> usize {
        self.datasets[0].dim()
    }

    /// `(alpha_min, lipschitz)` of user `n`'s loss.
    pub fn curvature(&self, n: usize) -> (f64, f64) {
        self.curvature[n]
    }
}

/// Parameters of one distributed run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub n_users: usize,
    pub loss_kind: LossKind,
    pub constraint: ConstraintSpec,
    pub protection: ProtectionSpec,
    pub scheme: MultiplierScheme,
    /// Stop threshold ζ on the stacked weight change.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub inner: InnerSolverConfig,
    pub seed: u64,
    /// Step for the equality multipliers μ under the hyperplane and Tikhonov
    /// schemes (the projection scheme reuses its own τ).
    pub mu_step: f64,
    /// When set, variable-multiplier runs also require the NCP residual
    /// (primal violation and `|λ_n φ_n|`) to fall below this value before
    /// reporting convergence.
    pub dual_tolerance: Option<f64>,
    pub execution: Execution,
}

impl RunConfig {
    pub fn new(n_users: usize, loss_kind: LossKind) -> Self {
        Self {
            n_users,
            loss_kind,
            constraint: ConstraintSpec::Classical,
            protection: ProtectionSpec::None,
            scheme: MultiplierScheme::Fixed { lambda0: 0.0, mu0: 0.0 },
            tolerance: 1e-4,
            max_iterations: 5000,
            inner: InnerSolverConfig::default(),
            seed: 0,
            mu_step: 2e-4,
            dual_tolerance: None,
            execution: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 {
            return Err(GadmmError::invalid("n_users must be >= 1"));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(GadmmError::invalid("tolerance must be > 0"));
        }
        if self.max_iterations == 0 {
            return Err(GadmmError::invalid("max_iterations must be >= 1"));
        }
        if !(self.mu_step >= 0.0 && self.mu_step.is_finite()) {
            return Err(GadmmError::invalid("mu_step must be finite and >= 0"));
        }
        if let Some(tol) = self.dual_tolerance {
            if !(tol > 0.0) {
                return Err(GadmmError::invalid("dual_tolerance must be > 0"));
            }
        }
        self.inner.validate()?;
        self.scheme.validate()?;
        self.constraint.validate(self.n_users)?;
        self.protection.validate(self.n_users)
    }
}

/// One round of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    /// `‖w_n^t − w_n^{t−1}‖` for each user.
    pub user_changes: Vec<f64>,
    /// Stacked change, the quantity compared against ζ.
    pub weight_change: f64,
    /// Largest per-user feasibility residual after the round.
    pub consensus_violation: f64,
    pub delta_param: Option<f64>,
    pub delta_objective: Option<f64>,
    /// Cumulative message count.
    pub messages_sent: u64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    pub converged: bool,
    pub iterations_used: usize,
}

impl RunTrace {
    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn messages_sent(&self) -> u64 {
        self.last().map_or(0, |r| r.messages_sent)
    }
}
