//! The `diagnose` report: structural checks plus sampled constants at the
//! state reached by the configured run.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::constraints::{build_linear_matrices, ClassicalSign, ConstraintSpec};
use crate::diagnostics::{
    build_upsilon, estimate_cocoercivity, estimate_strong_monotonicity, game_operator, is_p_matrix, kkt_residual,
    KKTResidual, SamplingConfig,
};
use crate::error::Result;
use crate::experiments::config::ExperimentConfig;
use crate::experiments::sweep::{prepare_data, run_one};
use crate::model::Problem;
use crate::multipliers::{tikhonov_step_valid, tikhonov_threshold, MultiplierScheme};
use crate::orchestrator::phi_response;
use crate::par::Execution;

const SAMPLES: usize = 256;
const PHI_SAMPLES: usize = 64;

#[derive(Debug, Clone, Serialize)]
pub struct TikhonovCheck {
    pub zeta0: f64,
    pub tau_n: f64,
    pub threshold: f64,
    pub step_valid: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport {
    /// Sampled constants are empirical minima, not certified bounds.
    pub estimates: &'static str,
    pub n_users: usize,
    pub dim: usize,
    pub upsilon: Vec<Vec<f64>>,
    pub upsilon_is_p_matrix: bool,
    pub upsilon_proximal: Vec<Vec<f64>>,
    pub upsilon_proximal_is_p_matrix: bool,
    pub strong_monotonicity_empirical: f64,
    pub robust_strong_monotonicity_empirical: f64,
    pub cocoercivity_empirical: Option<f64>,
    pub tikhonov: Option<TikhonovCheck>,
    pub m2_skew_symmetric: Option<bool>,
    pub run_converged: bool,
    pub run_iterations: usize,
    pub kkt: KKTResidual,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn diagnose(exp: &ExperimentConfig) -> Result<DiagnosticsReport> {
    let (data, w_star) = prepare_data(exp)?;
    let run = exp.run.clone();
    let problem = Problem::new(run.loss_kind, data.datasets.clone(), run.constraint.clone(), run.protection.clone())?;
    let n = problem.n_users();
    let d = problem.dim();

    let upsilon = build_upsilon(&problem, false);
    let upsilon_prox = build_upsilon(&problem, true);
    let sampling = SamplingConfig { execution: Execution::Sequential, ..SamplingConfig::new(SAMPLES, exp.data.seed) };
    let c_plain = estimate_strong_monotonicity(game_operator(&problem, false), n * d, 1.0, &sampling)?;
    let c_robust = estimate_strong_monotonicity(game_operator(&problem, true), n * d, 1.0, &sampling)?;

    let summary = run_one(run.clone(), &data, &w_star)?;
    let kkt = kkt_residual(&summary.state, &problem)?;

    let cocoercivity = if matches!(problem.constraint, ConstraintSpec::SoftNorm { .. }) {
        let state = &summary.state;
        let upper = state.lambda.iter().copied().fold(1.0, f64::max) * 2.0;
        let phi = |l: &DVector<f64>| {
            let v = phi_response(&problem, state, l.as_slice(), &run.inner, Execution::Sequential)
                .unwrap_or_else(|_| vec![f64::NAN; n]);
            DVector::from_vec(v)
        };
        let cfg = SamplingConfig { execution: Execution::Sequential, ..SamplingConfig::new(PHI_SAMPLES, exp.data.seed) };
        estimate_cocoercivity(phi, n, upper, &cfg).ok()
    } else {
        None
    };

    let tikhonov = match run.scheme {
        MultiplierScheme::Tikhonov { zeta0, tau_n, .. } => cocoercivity.map(|c| TikhonovCheck {
            zeta0,
            tau_n,
            threshold: tikhonov_threshold(zeta0, c),
            step_valid: tikhonov_step_valid(tau_n, zeta0, c),
        }),
        _ => None,
    };

    let m2_skew_symmetric =
        build_linear_matrices(&problem.constraint, n, ClassicalSign::Printed).ok().map(|m| m.is_skew_symmetric());

    Ok(DiagnosticsReport {
        estimates: "empirical",
        n_users: n,
        dim: d,
        upsilon_is_p_matrix: is_p_matrix(&upsilon.entries)?,
        upsilon: rows(&upsilon.entries),
        upsilon_proximal_is_p_matrix: is_p_matrix(&upsilon_prox.entries)?,
        upsilon_proximal: rows(&upsilon_prox.entries),
        strong_monotonicity_empirical: c_plain,
        robust_strong_monotonicity_empirical: c_robust,
        cocoercivity_empirical: cocoercivity,
        tikhonov,
        m2_skew_symmetric,
        run_converged: summary.trace.converged,
        run_iterations: summary.trace.iterations_used,
        kkt,
    })
}
