//! CSV, plot-data and text report writers. Every number is printed with nine
//! significant digits so reruns are byte-identical.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use crate::experiments::config::ExperimentConfig;
use crate::experiments::sweep::{SweepResults, SweepRow};
use crate::model::RunTrace;

pub fn fmt_num(v: f64) -> String {
    format!("{v:.8e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> io::Error {
    io::Error::other(e)
}

fn value_label(row: &SweepRow) -> String {
    fmt_opt(row.value)
}

/// `summary.csv`: one row per sweep value.
pub fn emit_summary_csv(results: &SweepResults, path: &Path) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["value", "iterations", "delta_param", "delta_objective", "messages", "converged", "status"])
        .map_err(csv_err)?;
    for row in &results.rows {
        let record = match &row.outcome {
            Ok(run) => vec![
                value_label(row),
                run.trace.iterations_used.to_string(),
                fmt_num(run.delta.param),
                fmt_num(run.delta.objective),
                run.trace.messages_sent().to_string(),
                run.trace.converged.to_string(),
                if run.trace.converged { "converged" } else { "max_iterations" }.to_string(),
            ],
            Err(e) => vec![
                value_label(row),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                "false".to_string(),
                format!("error: {e}"),
            ],
        };
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush()
}

/// Per-iteration trace of one run.
pub fn emit_trace_csv(trace: &RunTrace, path: &Path) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "iteration",
        "weight_change",
        "consensus_violation",
        "delta_param",
        "delta_objective",
        "messages",
        "lambda_min",
        "lambda_max",
    ])
    .map_err(csv_err)?;
    for r in &trace.records {
        w.write_record([
            r.iteration.to_string(),
            fmt_num(r.weight_change),
            fmt_num(r.consensus_violation),
            fmt_opt(r.delta_param),
            fmt_opt(r.delta_objective),
            r.messages_sent.to_string(),
            fmt_num(r.lambda_min),
            fmt_num(r.lambda_max),
        ])
        .map_err(csv_err)?;
    }
    w.flush()
}

/// Whitespace-separated `(iteration, Δ)` columns, one `#`-headed block per
/// sweep value, blocks separated by two blank lines.
pub fn emit_plot_data(results: &SweepResults, path: &Path) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let name = results.parameter.map_or("run", |p| p.name());
    writeln!(out, "# delta_param versus iteration")?;
    for (i, row) in results.rows.iter().enumerate() {
        if i > 0 {
            writeln!(out)?;
            writeln!(out)?;
        }
        match &row.outcome {
            Ok(run) => {
                writeln!(out, "# series {i}: {name}={}", value_label(row))?;
                writeln!(out, "# iteration delta_param")?;
                for r in &run.trace.records {
                    if let Some(d) = r.delta_param {
                        writeln!(out, "{} {}", r.iteration, fmt_num(d))?;
                    }
                }
            }
            Err(e) => writeln!(out, "# series {i}: {name}={} failed: {e}", value_label(row))?,
        }
    }
    out.flush()
}

/// Human-readable report with the settings used for every row.
pub fn emit_report(exp: &ExperimentConfig, results: &SweepResults, path: &Path) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let run = &exp.run;
    writeln!(out, "# gadmm experiment report")?;
    writeln!(
        out,
        "# Data are seeded synthetic draws. Absolute iteration counts and delta values are not"
    )?;
    writeln!(out, "# comparable with numbers obtained on other datasets; compare trends only.")?;
    writeln!(out)?;
    let d = &exp.data;
    writeln!(
        out,
        "data: seed={} users={} samples_per_user={} dim={} noise_std={}",
        d.seed, d.n_users, d.samples_per_user, d.dim, fmt_num(d.noise_std)
    )?;
    writeln!(out, "loss: {}", run.loss_kind.name())?;
    writeln!(out, "constraint: {}", run.constraint.name())?;
    writeln!(out, "scheme: {:?}", run.scheme)?;
    writeln!(out, "tolerance: {}  max_iterations: {}", fmt_num(run.tolerance), run.max_iterations)?;
    let inner = &run.inner;
    writeln!(
        out,
        "inner solver: method={:?} step_size={} tolerance={} max_iters={} box_bound={}",
        inner.method,
        inner.step_size.map_or_else(|| "1/L (curvature bound)".to_string(), fmt_num),
        fmt_num(inner.inner_tolerance),
        inner.inner_max_iters,
        fmt_num(inner.box_bound)
    )?;
    writeln!(out, "centralized solution norm: {}", fmt_num(results.w_star.norm()))?;
    writeln!(out)?;
    let name = results.parameter.map_or("run", |p| p.name());
    for row in &results.rows {
        match &row.outcome {
            Ok(r) => writeln!(
                out,
                "{name}={}: iterations={} converged={} delta_param={} delta_objective={} messages={}",
                value_label(row),
                r.trace.iterations_used,
                r.trace.converged,
                fmt_num(r.delta.param),
                fmt_num(r.delta.objective),
                r.trace.messages_sent()
            )?,
            Err(e) => writeln!(out, "{name}={}: failed: {e}", value_label(row))?,
        }
    }
    out.flush()
}

/// Writes summary, traces, plot data and report into `dir`.
pub fn emit_all(exp: &ExperimentConfig, results: &SweepResults, dir: &Path) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    emit_summary_csv(results, &dir.join("summary.csv"))?;
    for (i, row) in results.rows.iter().enumerate() {
        if let Ok(run) = &row.outcome {
            emit_trace_csv(&run.trace, &dir.join(format!("trace_{i:03}.csv")))?;
        }
    }
    emit_plot_data(results, &dir.join("plot.dat"))?;
    emit_report(exp, results, &dir.join("report.txt"))
}
