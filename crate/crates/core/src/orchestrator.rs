//! Deterministic synchronous server/user rounds with message accounting.
//!
//! Each round every user solves its local problem against a snapshot of the
//! previous round, the multipliers are updated (variable schemes only), and
//! the server refreshes `z`. Group constraints skip the server and exchange
//! weights along graph edges instead.

use nalgebra::DVector;

use crate::baseline::compute_delta;
use crate::constraints::{eval_equality, eval_inequality, ConstraintSpec};
use crate::error::{GadmmError, Result};
use crate::model::{init_state, state_distance, Problem, RunConfig, RunTrace, SystemState, TraceRecord, UserDataset};
use crate::multipliers::{
    hyperplane_update, mu_update, phi, projection_update, tikhonov_update, tikhonov_zeta, MultiplierScheme,
};
use crate::par::{try_map_indices, Execution};
use crate::prox::{solve_local, solve_local_with, update_z, InnerSolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sender {
    Server,
    User(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    Weights,
    Consensus,
    Multipliers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Message {
    pub round: usize,
    pub sender: Sender,
    pub payload_kind: PayloadKind,
    /// Number of scalars carried.
    pub payload_size: usize,
}

/// Hooks into the round loop, mainly for tests.
#[derive(Debug)]
pub enum RoundEvent<'a> {
    /// User `user` is about to solve round `round` reading `snapshot`.
    Solve { round: usize, user: usize, snapshot: &'a SystemState },
    /// Round `round` is complete.
    RoundEnd { round: usize, state: &'a SystemState },
}

pub type Observer<'a> = &'a (dyn Fn(&RoundEvent<'_>) + Sync);

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub state: SystemState,
    pub trace: RunTrace,
    /// Every transmission, when message recording is enabled.
    pub messages: Vec<Message>,
}

/// A configured distributed run.
pub struct Simulation<'a> {
    problem: Problem,
    config: RunConfig,
    reference: Option<DVector<f64>>,
    observer: Option<Observer<'a>>,
    record_messages: bool,
}

impl<'a> Simulation<'a> {
    pub fn new(config: RunConfig, datasets: Vec<UserDataset>) -> Result<Self> {
        config.validate()?;
        if datasets.len() != config.n_users {
            return Err(GadmmError::invalid(format!(
                "config has {} users but {} datasets were given",
                config.n_users,
                datasets.len()
            )));
        }
        let problem = Problem::new(config.loss_kind, datasets, config.constraint.clone(), config.protection.clone())?;
        Ok(Self { problem, config, reference: None, observer: None, record_messages: false })
    }

    /// Centralized solution used for the per-round Δ columns of the trace.
    pub fn with_reference(mut self, w_star: DVector<f64>) -> Self {
        self.reference = Some(w_star);
        self
    }

    pub fn with_observer(mut self, observer: Observer<'a>) -> Self {
        self.observer = Some(observer);
        self
    }

    pub fn record_messages(mut self, on: bool) -> Self {
        self.record_messages = on;
        self
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn run(&self) -> Result<RunOutput> {
        let cfg = &self.config;
        let problem = &self.problem;
        let n_users = problem.n_users();
        let mut state = init_state(cfg, problem.dim());
        let mut network = Network::new(self.record_messages);
        let mut trace = RunTrace::default();

        for round in 1..=cfg.max_iterations {
            let snapshot = state.clone();
            let weights = try_map_indices(cfg.execution, n_users, |n| {
                if let Some(obs) = self.observer {
                    obs(&RoundEvent::Solve { round, user: n, snapshot: &snapshot });
                }
                solve_local(problem, n, &snapshot, &snapshot.weights[n], &cfg.inner).map_err(|e| e.at_round(round))
            })?;
            state.weights = weights;
            network.share_weights(round, &problem.constraint, n_users, problem.dim());

            if cfg.scheme.is_variable() {
                self.update_multipliers(round, &snapshot, &mut state)?;
                network.share_multipliers(round, &problem.constraint, n_users);
            }

            if problem.constraint.uses_server() {
                state.consensus = update_z(&state, &problem.constraint);
                network.broadcast(round, n_users, problem.dim());
            }
            state.iteration = round;

            let record = self.record(round, &snapshot, &state, network.count)?;
            let change = record.weight_change;
            trace.records.push(record);
            if let Some(obs) = self.observer {
                obs(&RoundEvent::RoundEnd { round, state: &state });
            }
            if change <= cfg.tolerance && self.dual_settled(&state)? {
                trace.converged = true;
                break;
            }
        }
        trace.iterations_used = trace.records.len();
        Ok(RunOutput { state, trace, messages: network.log })
    }

    fn phi_at(&self, round: usize, snapshot: &SystemState, lambda: &[f64]) -> Result<Vec<f64>> {
        phi_response(&self.problem, snapshot, lambda, &self.config.inner, self.config.execution)
            .map_err(|e| e.at_round(round))
    }

    fn update_multipliers(&self, round: usize, snapshot: &SystemState, state: &mut SystemState) -> Result<()> {
        let cfg = &self.config;
        let constraint = &self.problem.constraint;
        let mu_step = match cfg.scheme {
            MultiplierScheme::Projection { tau } => tau,
            _ => cfg.mu_step,
        };
        state.lambda = match cfg.scheme {
            MultiplierScheme::Fixed { .. } => return Ok(()),
            MultiplierScheme::Projection { tau } => projection_update(&state.lambda, &phi(state, constraint)?, tau)?,
            MultiplierScheme::Hyperplane { delta, max_backtracks } => hyperplane_update(
                &state.lambda,
                |l: &[f64]| self.phi_at(round, snapshot, l),
                delta,
                max_backtracks,
            )?,
            MultiplierScheme::Tikhonov { zeta0, tau_n, inner_iters } => tikhonov_update(
                &state.lambda,
                |l: &[f64]| self.phi_at(round, snapshot, l),
                tikhonov_zeta(zeta0, round - 1),
                tau_n,
                inner_iters,
            )?,
        };
        let sums = equality_sums(state, constraint)?;
        state.mu = mu_update(&state.mu, &sums, mu_step)?;
        Ok(())
    }

    /// Optional NCP residual check for variable schemes.
    fn dual_settled(&self, state: &SystemState) -> Result<bool> {
        let Some(tol) = self.config.dual_tolerance else { return Ok(true) };
        if !self.config.scheme.is_variable() {
            return Ok(true);
        }
        let phi_vals = phi(state, &self.problem.constraint)?;
        Ok(phi_vals.iter().zip(&state.lambda).all(|(p, l)| (-p).max(0.0) <= tol && (l * p).abs() <= tol))
    }

    fn record(&self, round: usize, prev: &SystemState, state: &SystemState, messages: u64) -> Result<TraceRecord> {
        let constraint = &self.problem.constraint;
        let user_changes: Vec<f64> = prev.weights.iter().zip(&state.weights).map(|(a, b)| (a - b).norm()).collect();
        let weight_change = state_distance(prev, state)?;
        let mut violation = 0.0f64;
        for n in 0..state.n_users() {
            let w = &state.weights[n];
            let eq = eval_equality(constraint, n, w, &state.consensus, &state.weights)?.norm();
            let ineq = eval_inequality(constraint, n, w, &state.consensus)?.max(0.0);
            violation = violation.max(eq).max(ineq);
        }
        let (delta_param, delta_objective) = match &self.reference {
            Some(w_star) => {
                let d = compute_delta(state, w_star, self.problem.loss, &self.problem.datasets)?;
                (Some(d.param), Some(d.objective))
            }
            None => (None, None),
        };
        let lambda_min = state.lambda.iter().copied().fold(f64::INFINITY, f64::min);
        let lambda_max = state.lambda.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(TraceRecord {
            iteration: round,
            user_changes,
            weight_change,
            consensus_violation: violation,
            delta_param,
            delta_objective,
            messages_sent: messages,
            lambda_min,
            lambda_max,
        })
    }
}

/// φ as a function of the multipliers: every user re-solves its local
/// problem from `snapshot` with `λ_n` replaced, and `φ_n = −g²_n` is read off
/// the result.
pub fn phi_response(
    problem: &Problem,
    snapshot: &SystemState,
    lambda: &[f64],
    inner: &InnerSolverConfig,
    exec: Execution,
) -> Result<Vec<f64>> {
    if lambda.len() != problem.n_users() {
        return Err(GadmmError::invalid("one multiplier per user expected"));
    }
    try_map_indices(exec, problem.n_users(), |n| {
        let w = solve_local_with(problem, n, snapshot, &snapshot.weights[n], lambda[n], snapshot.mu[n], inner)?;
        Ok(-eval_inequality(&problem.constraint, n, &w, &snapshot.consensus)?)
    })
}

fn equality_sums(state: &SystemState, constraint: &ConstraintSpec) -> Result<Vec<f64>> {
    (0..state.n_users())
        .map(|n| Ok(eval_equality(constraint, n, &state.weights[n], &state.consensus, &state.weights)?.sum()))
        .collect()
}

struct Network {
    count: u64,
    log: Vec<Message>,
    record: bool,
}

impl Network {
    fn new(record: bool) -> Self {
        Self { count: 0, log: Vec::new(), record }
    }

    fn send(&mut self, round: usize, sender: Sender, payload_kind: PayloadKind, payload_size: usize) {
        self.count += 1;
        if self.record {
            self.log.push(Message { round, sender, payload_kind, payload_size });
        }
    }

    /// One uplink per user, or one message per directed edge without a server.
    fn share_weights(&mut self, round: usize, constraint: &ConstraintSpec, n_users: usize, dim: usize) {
        match constraint {
            ConstraintSpec::Group { adjacency } => {
                for (n, nb) in adjacency.iter().enumerate() {
                    for _ in nb {
                        self.send(round, Sender::User(n), PayloadKind::Weights, dim);
                    }
                }
            }
            _ => {
                for n in 0..n_users {
                    self.send(round, Sender::User(n), PayloadKind::Weights, dim);
                }
            }
        }
    }

    /// `(λ_n, μ_n)` relayed by the server, or sent along every edge.
    fn share_multipliers(&mut self, round: usize, constraint: &ConstraintSpec, n_users: usize) {
        match constraint {
            ConstraintSpec::Group { adjacency } => {
                for (n, nb) in adjacency.iter().enumerate() {
                    for _ in nb {
                        self.send(round, Sender::User(n), PayloadKind::Multipliers, 2);
                    }
                }
            }
            _ => {
                for n in 0..n_users {
                    self.send(round, Sender::User(n), PayloadKind::Multipliers, 2);
                }
            }
        }
    }

    fn broadcast(&mut self, round: usize, n_users: usize, dim: usize) {
        for _ in 0..n_users {
            self.send(round, Sender::Server, PayloadKind::Consensus, dim);
        }
    }
}

/// `‖w^{t−1} − w^t‖ ≤ ζ` over the stacked user weights.
pub fn has_converged(prev: &SystemState, curr: &SystemState, zeta: f64) -> Result<bool> {
    Ok(state_distance(prev, curr)? <= zeta)
}

/// Algorithm with constant multipliers.
pub fn run_algorithm1(config: &RunConfig, datasets: Vec<UserDataset>) -> Result<(SystemState, RunTrace)> {
    if config.scheme.is_variable() {
        return Err(GadmmError::invalid("algorithm 1 needs the fixed multiplier scheme"));
    }
    let out = Simulation::new(config.clone(), datasets)?.run()?;
    Ok((out.state, out.trace))
}

/// Algorithm with multipliers updated every round by a variable scheme.
pub fn run_algorithm2(config: &RunConfig, datasets: Vec<UserDataset>) -> Result<(SystemState, RunTrace)> {
    if !config.scheme.is_variable() {
        return Err(GadmmError::invalid("algorithm 2 needs a variable multiplier scheme"));
    }
    let out = Simulation::new(config.clone(), datasets)?.run()?;
    Ok((out.state, out.trace))
}
