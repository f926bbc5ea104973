//! Experiment manifests in TOML.
//!
//! ```toml
//! seed = 7
//! n_users = 5
//! samples_per_user = 20
//! dim = 10
//! noise_std = 2.0
//! loss = "linear"            # linear | logistic
//! tolerance = 1e-4
//! max_iterations = 20000
//! workers = 1
//! dual_tolerance = 1e-3      # optional
//!
//! [constraint]
//! kind = "soft_norm"         # classical | soft_norm | group
//! p = 2
//! epsilon = [0.05]           # one value, or one per user
//! topology = "chain"         # group only: chain | ring | complete
//! adjacency = [[1], [0]]     # group only, instead of topology
//!
//! [protection]
//! varsigma = 1e-3
//! delta = 0.1
//!
//! [scheme]
//! kind = "projection"        # fixed | projection | hyperplane | tikhonov
//! tau = 2e-4
//!
//! [inner]
//! step_size = 0.01
//! max_iters = 5000
//! tolerance = 1e-9
//! box_bound = 1000.0
//! method = "auto"            # auto | iterative
//!
//! [sweep]
//! parameter = "epsilon"      # epsilon | varsigma
//! values = [0.01, 0.05, 0.5]
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::constraints::ConstraintSpec;
use crate::losses::LossKind;
use crate::model::RunConfig;
use crate::multipliers::MultiplierScheme;
use crate::par::Execution;
use crate::protection::ProtectionSpec;
use crate::prox::{InnerSolverConfig, LocalMethod};

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    MissingFile(PathBuf),
    Invalid { field: String, message: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::MissingFile(p) => write!(f, "config file not found: {}", p.display()),
            ConfigError::Invalid { field, message } => write!(f, "invalid config field `{field}`: {message}"),
        }
    }
}

impl std::error::Error for ConfigError {}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), message: message.into() }
}

/// Synthetic data generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub seed: u64,
    pub n_users: usize,
    pub samples_per_user: usize,
    pub dim: usize,
    pub noise_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    Epsilon,
    Varsigma,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Epsilon => "epsilon",
            SweepParameter::Varsigma => "varsigma",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    pub run: RunConfig,
    pub sweep: Option<SweepSpec>,
    pub workers: usize,
    /// Protection offset δ, kept for ς sweeps.
    pub protection_delta: f64,
}

impl ExperimentConfig {
    /// Replaces the seed of both the data generator and the run.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.run.seed = seed;
        self
    }

    /// The run configuration for one sweep value.
    pub fn run_for(&self, parameter: SweepParameter, value: f64) -> RunConfig {
        let mut run = self.run.clone();
        let n = run.n_users;
        match parameter {
            SweepParameter::Epsilon => {
                let p = run.constraint.soft_order().unwrap_or(2);
                run.constraint = ConstraintSpec::soft_norm(p, value, n);
            }
            SweepParameter::Varsigma => {
                run.protection = ProtectionSpec::uniform(value, self.protection_delta, n);
            }
        }
        run
    }
}

/// Typed accessors over one TOML table that report the dotted field path.
struct Section<'a> {
    prefix: &'a str,
    table: Option<&'a Table>,
}

impl<'a> Section<'a> {
    fn new(prefix: &'a str, table: Option<&'a Table>, allowed: &[&str]) -> Result<Self, ConfigError> {
        if let Some(t) = table {
            for key in t.keys() {
                if !allowed.contains(&key.as_str()) {
                    return Err(invalid(&Self::join(prefix, key), "unknown key"));
                }
            }
        }
        Ok(Self { prefix, table })
    }

    fn join(prefix: &str, key: &str) -> String {
        if prefix.is_empty() {
            key.to_string()
        } else {
            format!("{prefix}.{key}")
        }
    }

    fn path(&self, key: &str) -> String {
        Self::join(self.prefix, key)
    }

    fn get(&self, key: &str) -> Option<&'a Value> {
        self.table.and_then(|t| t.get(key))
    }

    fn f64(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Float(v)) => Ok(Some(*v)),
            Some(Value::Integer(v)) => Ok(Some(*v as f64)),
            Some(_) => Err(invalid(&self.path(key), "expected a number")),
        }
    }

    fn uint(&self, key: &str) -> Result<Option<u64>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Integer(v)) if *v >= 0 => Ok(Some(*v as u64)),
            Some(_) => Err(invalid(&self.path(key), "expected a non-negative integer")),
        }
    }

    fn usize(&self, key: &str) -> Result<Option<usize>, ConfigError> {
        Ok(self.uint(key)?.map(|v| v as usize))
    }

    fn str(&self, key: &str) -> Result<Option<&'a str>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.as_str())),
            Some(_) => Err(invalid(&self.path(key), "expected a string")),
        }
    }

    fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::Float(x) => Ok(*x),
                    Value::Integer(x) => Ok(*x as f64),
                    _ => Err(invalid(&self.path(key), "expected a list of numbers")),
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
            Some(Value::Float(x)) => Ok(Some(vec![*x])),
            Some(Value::Integer(x)) => Ok(Some(vec![*x as f64])),
            Some(_) => Err(invalid(&self.path(key), "expected a list of numbers")),
        }
    }
}

fn sub_table<'a>(root: &'a Table, key: &str) -> Result<Option<&'a Table>, ConfigError> {
    match root.get(key) {
        None => Ok(None),
        Some(Value::Table(t)) => Ok(Some(t)),
        Some(_) => Err(invalid(key, "expected a table")),
    }
}

/// Reads and validates an experiment manifest.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|_| ConfigError::MissingFile(path.to_path_buf()))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let root: Table = text.parse().map_err(|e: toml::de::Error| invalid("<document>", e.message().to_string()))?;
    let top = Section::new(
        "",
        Some(&root),
        &[
            "seed",
            "n_users",
            "samples_per_user",
            "dim",
            "noise_std",
            "loss",
            "tolerance",
            "max_iterations",
            "workers",
            "dual_tolerance",
            "constraint",
            "protection",
            "scheme",
            "inner",
            "sweep",
        ],
    )?;

    let data = DataSpec {
        seed: top.uint("seed")?.unwrap_or(0),
        n_users: top.usize("n_users")?.unwrap_or(5),
        samples_per_user: top.usize("samples_per_user")?.unwrap_or(20),
        dim: top.usize("dim")?.unwrap_or(10),
        noise_std: top.f64("noise_std")?.unwrap_or(1.0),
    };
    for (field, v) in [("n_users", data.n_users), ("samples_per_user", data.samples_per_user), ("dim", data.dim)] {
        if v == 0 {
            return Err(invalid(field, "must be >= 1"));
        }
    }
    if !(data.noise_std >= 0.0 && data.noise_std.is_finite()) {
        return Err(invalid("noise_std", "must be finite and >= 0"));
    }
    let n = data.n_users;

    let loss = match top.str("loss")?.unwrap_or("linear") {
        "linear" => LossKind::Linear,
        "logistic" => LossKind::Logistic,
        other => return Err(invalid("loss", format!("unknown loss kind `{other}` (linear | logistic)"))),
    };

    let mut run = RunConfig::new(n, loss);
    run.seed = data.seed;
    run.execution = Execution::Sequential;
    if let Some(t) = top.f64("tolerance")? {
        if !(t > 0.0) {
            return Err(invalid("tolerance", "must be > 0"));
        }
        run.tolerance = t;
    }
    if let Some(m) = top.usize("max_iterations")? {
        if m == 0 {
            return Err(invalid("max_iterations", "must be >= 1"));
        }
        run.max_iterations = m;
    }
    run.dual_tolerance = top.f64("dual_tolerance")?;
    if run.dual_tolerance.is_some_and(|t| !(t > 0.0)) {
        return Err(invalid("dual_tolerance", "must be > 0"));
    }
    let workers = top.usize("workers")?.unwrap_or(1).max(1);

    let sweep = parse_sweep(&root)?;
    run.constraint = parse_constraint(&root, n, sweep.as_ref())?;
    let (protection, protection_delta) = parse_protection(&root, n)?;
    run.protection = protection;
    let (scheme, mu_step) = parse_scheme(&root)?;
    run.scheme = scheme;
    run.mu_step = mu_step;
    run.inner = parse_inner(&root)?;

    run.validate().map_err(|e| invalid("<run>", e.to_string()))?;
    Ok(ExperimentConfig { data, run, sweep, workers, protection_delta })
}

fn parse_sweep(root: &Table) -> Result<Option<SweepSpec>, ConfigError> {
    let Some(table) = sub_table(root, "sweep")? else { return Ok(None) };
    let s = Section::new("sweep", Some(table), &["parameter", "values"])?;
    let parameter = match s.str("parameter")? {
        Some("epsilon") => SweepParameter::Epsilon,
        Some("varsigma") => SweepParameter::Varsigma,
        Some(other) => return Err(invalid("sweep.parameter", format!("unknown parameter `{other}` (epsilon | varsigma)"))),
        None => return Err(invalid("sweep.parameter", "missing")),
    };
    let values = s.f64_list("values")?.unwrap_or_default();
    if values.is_empty() {
        return Err(invalid("sweep.values", "must list at least one value"));
    }
    if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(invalid("sweep.values", "values must be finite and >= 0"));
    }
    Ok(Some(SweepSpec { parameter, values }))
}

fn parse_constraint(root: &Table, n: usize, sweep: Option<&SweepSpec>) -> Result<ConstraintSpec, ConfigError> {
    let table = sub_table(root, "constraint")?;
    let s = Section::new("constraint", table, &["kind", "p", "epsilon", "topology", "adjacency"])?;
    let kind = s.str("kind")?.unwrap_or("classical");
    let epsilon_sweep = sweep.is_some_and(|sw| sw.parameter == SweepParameter::Epsilon);
    if epsilon_sweep && kind != "soft_norm" {
        return Err(invalid("constraint.kind", "an epsilon sweep needs kind = \"soft_norm\""));
    }
    match kind {
        "classical" => Ok(ConstraintSpec::Classical),
        "soft_norm" => {
            let p = s.uint("p")?.unwrap_or(2);
            if p != 1 && p != 2 {
                return Err(invalid("constraint.p", "must be 1 or 2"));
            }
            let eps = match s.f64_list("epsilon")? {
                Some(list) => list,
                // the sweep supplies ε
                None if epsilon_sweep => vec![sweep.map_or(0.0, |sw| sw.values[0])],
                None => return Err(invalid("constraint.epsilon", "required for soft_norm")),
            };
            let epsilon = match eps.len() {
                0 => return Err(invalid("constraint.epsilon", "must not be empty")),
                1 => vec![eps[0]; n],
                len if len == n => eps,
                len => return Err(invalid("constraint.epsilon", format!("has {len} entries for {n} users"))),
            };
            if epsilon.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
                return Err(invalid("constraint.epsilon", "entries must be finite and >= 0"));
            }
            Ok(ConstraintSpec::SoftNorm { p: p as u32, epsilon })
        }
        "group" => {
            let adjacency = match (s.get("adjacency"), s.str("topology")?) {
                (Some(Value::Array(rows)), None) => rows
                    .iter()
                    .map(|row| match row {
                        Value::Array(items) => items
                            .iter()
                            .map(|v| match v {
                                Value::Integer(i) if *i >= 0 => Ok(*i as usize),
                                _ => Err(invalid("constraint.adjacency", "expected user indices")),
                            })
                            .collect::<Result<Vec<_>, _>>(),
                        _ => Err(invalid("constraint.adjacency", "expected a list of lists")),
                    })
                    .collect::<Result<Vec<_>, _>>()?,
                (Some(_), None) => return Err(invalid("constraint.adjacency", "expected a list of lists")),
                (Some(_), Some(_)) => return Err(invalid("constraint.topology", "give either topology or adjacency")),
                (None, topology) => topology_adjacency(topology.unwrap_or("chain"), n)?,
            };
            let spec = ConstraintSpec::Group { adjacency };
            spec.validate(n).map_err(|e| invalid("constraint.adjacency", e.to_string()))?;
            Ok(spec)
        }
        other => Err(invalid("constraint.kind", format!("unknown kind `{other}` (classical | soft_norm | group)"))),
    }
}

fn topology_adjacency(name: &str, n: usize) -> Result<Vec<Vec<usize>>, ConfigError> {
    match name {
        "chain" => match ConstraintSpec::chain(n) {
            ConstraintSpec::Group { adjacency } => Ok(adjacency),
            _ => unreachable!(),
        },
        "ring" => {
            if n < 3 {
                return Err(invalid("constraint.topology", "a ring needs at least 3 users"));
            }
            Ok((0..n).map(|i| vec![(i + n - 1) % n, (i + 1) % n]).collect())
        }
        "complete" => Ok((0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect()),
        other => Err(invalid("constraint.topology", format!("unknown topology `{other}` (chain | ring | complete)"))),
    }
}

fn parse_protection(root: &Table, n: usize) -> Result<(ProtectionSpec, f64), ConfigError> {
    let table = sub_table(root, "protection")?;
    let s = Section::new("protection", table, &["varsigma", "delta"])?;
    let varsigma = s.f64("varsigma")?;
    let delta = s.f64("delta")?;
    for (field, v) in [("protection.varsigma", varsigma), ("protection.delta", delta)] {
        if v.is_some_and(|x| !(x >= 0.0 && x.is_finite())) {
            return Err(invalid(field, "must be finite and >= 0"));
        }
    }
    let spec = match (varsigma, delta) {
        (None, None) => ProtectionSpec::None,
        (s, d) => ProtectionSpec::uniform(s.unwrap_or(0.0), d.unwrap_or(0.0), n),
    };
    Ok((spec, delta.unwrap_or(0.0)))
}

fn parse_scheme(root: &Table) -> Result<(MultiplierScheme, f64), ConfigError> {
    let table = sub_table(root, "scheme")?;
    let s = Section::new(
        "scheme",
        table,
        &["kind", "tau", "delta", "max_backtracks", "zeta0", "tau_n", "inner_iters", "lambda0", "mu0", "mu_step"],
    )?;
    let positive = |field: &str, v: Option<f64>, default: f64| -> Result<f64, ConfigError> {
        let v = v.unwrap_or(default);
        if !(v > 0.0 && v.is_finite()) {
            return Err(invalid(field, "must be > 0"));
        }
        Ok(v)
    };
    let mu_step = s.f64("mu_step")?.unwrap_or(2e-4);
    if !(mu_step >= 0.0 && mu_step.is_finite()) {
        return Err(invalid("scheme.mu_step", "must be finite and >= 0"));
    }
    let scheme = match s.str("kind")?.unwrap_or("projection") {
        "fixed" => {
            let lambda0 = s.f64("lambda0")?.unwrap_or(0.0);
            if !(lambda0 >= 0.0 && lambda0.is_finite()) {
                return Err(invalid("scheme.lambda0", "must be finite and >= 0"));
            }
            MultiplierScheme::Fixed { lambda0, mu0: s.f64("mu0")?.unwrap_or(0.0) }
        }
        "projection" => MultiplierScheme::Projection { tau: positive("scheme.tau", s.f64("tau")?, 2e-4)? },
        "hyperplane" => {
            let delta = s.f64("delta")?.unwrap_or(0.1);
            if !(delta > 0.0 && delta < 1.0) {
                return Err(invalid("scheme.delta", "must lie in (0, 1)"));
            }
            let max_backtracks = s.uint("max_backtracks")?.unwrap_or(40);
            let max_backtracks = u32::try_from(max_backtracks).map_err(|_| invalid("scheme.max_backtracks", "too large"))?;
            MultiplierScheme::Hyperplane { delta, max_backtracks }
        }
        "tikhonov" => {
            let inner_iters = s.usize("inner_iters")?.unwrap_or(10);
            if inner_iters == 0 {
                return Err(invalid("scheme.inner_iters", "must be >= 1"));
            }
            MultiplierScheme::Tikhonov {
                zeta0: positive("scheme.zeta0", s.f64("zeta0")?, 0.1)?,
                tau_n: positive("scheme.tau_n", s.f64("tau_n")?, 1.0)?,
                inner_iters,
            }
        }
        other => {
            return Err(invalid(
                "scheme.kind",
                format!("unknown scheme `{other}` (fixed | projection | hyperplane | tikhonov)"),
            ))
        }
    };
    Ok((scheme, mu_step))
}

fn parse_inner(root: &Table) -> Result<InnerSolverConfig, ConfigError> {
    let table = sub_table(root, "inner")?;
    let s = Section::new("inner", table, &["step_size", "max_iters", "tolerance", "box_bound", "method"])?;
    let mut inner = InnerSolverConfig::default();
    if let Some(eta) = s.f64("step_size")? {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(invalid("inner.step_size", "must be > 0"));
        }
        inner.step_size = Some(eta);
    }
    if let Some(m) = s.usize("max_iters")? {
        if m == 0 {
            return Err(invalid("inner.max_iters", "must be >= 1"));
        }
        inner.inner_max_iters = m;
    }
    if let Some(t) = s.f64("tolerance")? {
        if !(t > 0.0) {
            return Err(invalid("inner.tolerance", "must be > 0"));
        }
        inner.inner_tolerance = t;
    }
    if let Some(b) = s.f64("box_bound")? {
        if !(b > 0.0) {
            return Err(invalid("inner.box_bound", "must be > 0"));
        }
        inner.box_bound = b;
    }
    inner.method = match s.str("method")?.unwrap_or("auto") {
        "auto" => LocalMethod::Auto,
        "iterative" => LocalMethod::Iterative,
        other => return Err(invalid("inner.method", format!("unknown method `{other}` (auto | iterative)"))),
    };
    Ok(inner)
}
