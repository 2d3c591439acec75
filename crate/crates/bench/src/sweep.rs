//! Multi-trial sweeps. Trial `i` of a method uses the `i`-th seed and, for
//! racing, the `i`-th entry of the planned-friction grid.
//!
//! `table.csv` columns: `method, seed, trial, theta_planned, success,
//! safe_run, laps, first_lap_time, last_lap_time, total_cost, cost_pct,
//! budget_consumed_pct, informative_commits`, then `reduction_<p>` per
//! parameter.

use std::path::Path;

use dgk::engine::Method;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::MetricsSummary;
use crate::output::{fmt_float, write_json, write_run};
use crate::run::run_scenario;
use crate::scenario::{ModelKind, Scenario};
use crate::{BenchError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub method: Method,
    pub seed: u64,
    pub trial: usize,
    pub theta_planned: Option<f64>,
    pub summary: MetricsSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: String,
    pub trials: usize,
    pub safe_runs: usize,
    pub safe_run_pct: f64,
    pub successes: usize,
    pub success_pct: f64,
    pub mean_cost_pct: f64,
    /// Mean over every completed lap of every trial.
    pub mean_lap_time: Option<f64>,
    pub mean_first_lap_time: Option<f64>,
    pub mean_last_lap_time: Option<f64>,
    pub mean_budget_consumed_pct: Option<f64>,
    pub mean_uncertainty_reduction_pct: Vec<f64>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn aggregate(method: Method, rows: &[&TrialRow]) -> MethodAggregate {
    let n = rows.len();
    let pct = |k: usize| if n == 0 { 0.0 } else { 100.0 * k as f64 / n as f64 };
    let safe_runs = rows.iter().filter(|r| r.summary.safe_run).count();
    let successes = rows.iter().filter(|r| r.summary.success).count();
    let p = rows.first().map_or(0, |r| r.summary.uncertainty_reduction_pct.len());
    MethodAggregate {
        method: method.name().to_string(),
        trials: n,
        safe_runs,
        safe_run_pct: pct(safe_runs),
        successes,
        success_pct: pct(successes),
        mean_cost_pct: mean(rows.iter().map(|r| r.summary.cost_pct)).unwrap_or(f64::NAN),
        mean_lap_time: mean(rows.iter().flat_map(|r| r.summary.lap_times.iter().copied())),
        mean_first_lap_time: mean(rows.iter().filter_map(|r| r.summary.first_lap_time)),
        mean_last_lap_time: mean(rows.iter().filter_map(|r| r.summary.last_lap_time)),
        mean_budget_consumed_pct: mean(rows.iter().filter_map(|r| r.summary.budget_consumed_pct)),
        mean_uncertainty_reduction_pct: (0..p)
            .map(|i| mean(rows.iter().map(|r| r.summary.uncertainty_reduction_pct[i])).unwrap_or(f64::NAN))
            .collect(),
    }
}

pub fn table_header(kind: ModelKind) -> Vec<String> {
    let mut h: Vec<String> = [
        "method",
        "seed",
        "trial",
        "theta_planned",
        "success",
        "safe_run",
        "laps",
        "first_lap_time",
        "last_lap_time",
        "total_cost",
        "cost_pct",
        "budget_consumed_pct",
        "informative_commits",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend(kind.param_names().iter().map(|n| format!("reduction_{n}")));
    h
}

fn write_table(path: &Path, kind: ModelKind, rows: &[TrialRow]) -> Result<()> {
    let f = |x: Option<f64>| x.map(fmt_float).unwrap_or_default();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(table_header(kind))?;
    for r in rows {
        let s = &r.summary;
        let mut rec = vec![
            r.method.name().to_string(),
            r.seed.to_string(),
            r.trial.to_string(),
            f(r.theta_planned),
            s.success.to_string(),
            s.safe_run.to_string(),
            s.laps.to_string(),
            f(s.first_lap_time),
            f(s.last_lap_time),
            fmt_float(s.total_cost),
            fmt_float(s.cost_pct),
            f(s.budget_consumed_pct),
            s.informative_commits.to_string(),
        ];
        rec.extend(s.uncertainty_reduction_pct.iter().map(|v| fmt_float(*v)));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub struct SweepResult {
    pub rows: Vec<TrialRow>,
    pub aggregates: Vec<MethodAggregate>,
}

/// Runs every method on every seed in parallel. With `out`, per-trial
/// outputs go to `<out>/<method>/seed_<seed>/` next to `table.csv` and
/// `aggregate.json`.
pub fn sweep(sc: &Scenario, seeds: &[u64], methods: &[Method], out: Option<&Path>) -> Result<SweepResult> {
    if seeds.is_empty() {
        return Err(BenchError::Invalid("a sweep needs at least one seed".into()));
    }
    if methods.is_empty() {
        return Err(BenchError::Invalid("a sweep needs at least one method".into()));
    }
    for &m in methods {
        sc.check_method(m)?;
    }
    let jobs: Vec<(Method, usize, u64)> = methods
        .iter()
        .flat_map(|&m| seeds.iter().enumerate().map(move |(i, &s)| (m, i, s)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(method, trial, seed)| {
            let run = run_scenario(sc, method, seed, Some(trial))?;
            if let Some(dir) = out {
                write_run(&dir.join(method.name()).join(format!("seed_{seed}")), sc, &run)?;
            }
            Ok(TrialRow {
                method,
                seed,
                trial,
                theta_planned: run.theta_planned,
                summary: run.summary,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregates = methods
        .iter()
        .map(|&m| aggregate(m, &rows.iter().filter(|r| r.method == m).collect::<Vec<_>>()))
        .collect();
    let result = SweepResult { rows, aggregates };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_table(&dir.join("table.csv"), sc.model, &result.rows)?;
        write_json(&dir.join("aggregate.json"), &result.aggregates)?;
    }
    Ok(result)
}
