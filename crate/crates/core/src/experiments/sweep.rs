//! Single runs and parameter sweeps over seeded synthetic data.

use nalgebra::DVector;

use crate::baseline::{compute_delta, solve_centralized, Delta};
use crate::error::{GadmmError, Result};
use crate::experiments::config::{ExperimentConfig, SweepParameter, SweepSpec};
use crate::losses::LossKind;
use crate::model::{generate_synthetic, RunConfig, RunTrace, SyntheticData, SystemState};
use crate::orchestrator::Simulation;
use crate::par::{map_indices, with_workers, Execution};

const CENTRAL_TOLERANCE: f64 = 1e-9;
const CENTRAL_MAX_ITERS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub state: SystemState,
    pub trace: RunTrace,
    pub delta: Delta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// Swept value; `None` for a plain run.
    pub value: Option<f64>,
    pub outcome: Result<RunSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResults {
    pub parameter: Option<SweepParameter>,
    pub rows: Vec<SweepRow>,
    pub w_star: DVector<f64>,
}

impl SweepResults {
    pub fn all_completed(&self) -> bool {
        self.rows.iter().all(|r| r.outcome.is_ok())
    }
}

/// Synthetic data and its centralized solution.
pub fn prepare_data(exp: &ExperimentConfig) -> Result<(SyntheticData, DVector<f64>)> {
    let d = &exp.data;
    let data = generate_synthetic(d.seed, d.n_users, d.samples_per_user, d.dim, d.noise_std, exp.run.loss_kind)?;
    let w_star = solve_centralized(exp.run.loss_kind, &data.datasets, CENTRAL_TOLERANCE, CENTRAL_MAX_ITERS)?;
    Ok((data, w_star))
}

/// One orchestrated run with Δ tracked against `w_star`.
pub fn run_one(config: RunConfig, data: &SyntheticData, w_star: &DVector<f64>) -> Result<RunSummary> {
    let loss: LossKind = config.loss_kind;
    let out = Simulation::new(config, data.datasets.clone())?.with_reference(w_star.clone()).run()?;
    let delta = compute_delta(&out.state, w_star, loss, &data.datasets)?;
    Ok(RunSummary { state: out.state, trace: out.trace, delta })
}

pub fn run_single(exp: &ExperimentConfig) -> Result<SweepResults> {
    let (data, w_star) = prepare_data(exp)?;
    let mut config = exp.run.clone();
    if exp.workers > 1 {
        config.execution = Execution::Parallel;
    }
    let outcome = with_workers(exp.workers, || run_one(config, &data, &w_star));
    Ok(SweepResults { parameter: None, rows: vec![SweepRow { value: None, outcome }], w_star })
}

/// One run per sweep value on shared data. Failed runs are recorded in their
/// row and the remaining values still run.
pub fn run_sweep(exp: &ExperimentConfig, sweep: &SweepSpec) -> Result<SweepResults> {
    if sweep.values.is_empty() {
        return Err(GadmmError::invalid("sweep needs at least one value"));
    }
    let (data, w_star) = prepare_data(exp)?;
    let exec = if exp.workers > 1 { Execution::Parallel } else { Execution::Sequential };
    let rows = with_workers(exp.workers, || {
        map_indices(exec, sweep.values.len(), |i| {
            let value = sweep.values[i];
            let outcome = run_one(exp.run_for(sweep.parameter, value), &data, &w_star);
            SweepRow { value: Some(value), outcome }
        })
    });
    Ok(SweepResults { parameter: Some(sweep.parameter), rows, w_star })
}
