//! Output files of a single run. Column orders:
//!
//! - `epochs.csv`: `k, t, committed, index, horizon, delta_xi, score, charge,
//!   spent, n_candidates, n_valid`, then `lo_<p>, hi_<p>, width_<p>` per
//!   parameter, then `note`.
//! - `candidates.csv`: `k, t, index, horizon, valid, p_safe, cost_info,
//!   cost_cons, delta_xi, score, exploration_cost, budget_feasible`.
//! - `trajectory.csv`: `t`, one column per state, one per input (empty on
//!   the final sample), `tag`, and `lap` for racing.
//! - `bounds.csv`: `t`, then `lo_<p>, hi_<p>, width_<p>` per parameter.
//! - `summary.json`: [`MetricsSummary`]; `scenario.json`: the scenario with
//!   every default filled in.
//!
//! Floats carry 9 significant digits.

use std::fs;
use std::path::Path;

use dgk::engine::log::MissionLog;

use crate::metrics::MetricsSummary;
use crate::run::RunResult;
use crate::scenario::{ModelKind, Scenario};
use crate::Result;

/// `x` rounded to 9 significant digits, printed in shortest form.
pub fn fmt_float(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float");
    rounded.to_string()
}

/// `x` rounded as it would be written.
pub fn round_sig(x: f64) -> f64 {
    if x.is_finite() {
        format!("{x:.8e}").parse().expect("formatted float")
    } else {
        x
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn bound_header(prefix: &mut Vec<String>, names: &[&str]) {
    for n in names {
        prefix.push(format!("lo_{n}"));
        prefix.push(format!("hi_{n}"));
        prefix.push(format!("width_{n}"));
    }
}

fn bound_fields(row: &mut Vec<String>, lo: &[f64], hi: &[f64]) {
    for (l, h) in lo.iter().zip(hi) {
        row.push(fmt_float(*l));
        row.push(fmt_float(*h));
        row.push(fmt_float(h - l));
    }
}

pub fn epochs_header(kind: ModelKind) -> Vec<String> {
    let mut h: Vec<String> = [
        "k", "t", "committed", "index", "horizon", "delta_xi", "score", "charge", "spent", "n_candidates", "n_valid",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    bound_header(&mut h, kind.param_names());
    h.push("note".into());
    h
}

pub const CANDIDATES_HEADER: [&str; 12] = [
    "k",
    "t",
    "index",
    "horizon",
    "valid",
    "p_safe",
    "cost_info",
    "cost_cons",
    "delta_xi",
    "score",
    "exploration_cost",
    "budget_feasible",
];

pub fn trajectory_header(kind: ModelKind) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend(kind.state_names().iter().map(|s| s.to_string()));
    h.extend(kind.input_names().iter().map(|s| s.to_string()));
    h.push("tag".into());
    if kind == ModelKind::Racing {
        h.push("lap".into());
    }
    h
}

pub fn bounds_header(kind: ModelKind) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    bound_header(&mut h, kind.param_names());
    h
}

pub fn write_epochs(path: &Path, kind: ModelKind, log: &MissionLog) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(epochs_header(kind))?;
    for e in &log.epochs {
        let mut row = vec![
            e.k.to_string(),
            fmt_float(e.t),
            e.committed.as_str().to_string(),
            opt(e.index),
            fmt_float(e.horizon),
            fmt_float(e.delta_xi),
            fmt_float(e.score),
            fmt_float(e.charge),
            fmt_float(e.spent),
            e.n_candidates.to_string(),
            e.n_valid.to_string(),
        ];
        bound_fields(&mut row, &e.lo, &e.hi);
        row.push(e.note.clone());
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_candidates(path: &Path, log: &MissionLog) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CANDIDATES_HEADER)?;
    for e in &log.epochs {
        for c in &e.candidates {
            w.write_record([
                e.k.to_string(),
                fmt_float(e.t),
                c.index.to_string(),
                fmt_float(c.horizon),
                opt(c.valid),
                fmt_float(c.p_safe),
                fmt_float(c.cost_info),
                fmt_float(c.cost_cons),
                fmt_float(c.delta_xi),
                fmt_float(c.score),
                fmt_float(c.exploration_cost),
                c.budget_feasible.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_trajectory(path: &Path, kind: ModelKind, log: &MissionLog) -> Result<()> {
    let traj = &log.executed;
    let t0 = traj.start_time();
    let mut crossings = Vec::with_capacity(log.outcome.lap_times.len());
    let mut acc = t0;
    for lt in &log.outcome.lap_times {
        acc += lt;
        crossings.push(acc);
    }
    let m = kind.input_names().len();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(trajectory_header(kind))?;
    for (k, (t, x)) in traj.times.iter().zip(&traj.states).enumerate() {
        let mut row = vec![fmt_float(*t)];
        row.extend(x.iter().map(|v| fmt_float(*v)));
        match traj.inputs.get(k) {
            Some(u) => row.extend(u.iter().map(|v| fmt_float(*v))),
            None => row.extend(std::iter::repeat_n(String::new(), m)),
        }
        let tag = log.tags.get(k).or(log.tags.last());
        row.push(tag.map(|t| t.as_str().to_string()).unwrap_or_default());
        if kind == ModelKind::Racing {
            row.push(crossings.partition_point(|&c| c <= *t).to_string());
        }
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_bounds(path: &Path, kind: ModelKind, log: &MissionLog) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(bounds_header(kind))?;
    for b in &log.bounds {
        let mut row = vec![fmt_float(b.t)];
        bound_fields(&mut row, &b.lo, &b.hi);
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// JSON value with every float rounded to the written precision.
pub fn rounded_json<T: serde::Serialize>(v: &T) -> Result<serde_json::Value> {
    fn walk(v: &mut serde_json::Value) {
        match v {
            serde_json::Value::Number(n) if n.is_f64() => {
                if let Some(r) = n.as_f64().map(round_sig).and_then(serde_json::Number::from_f64) {
                    *n = r;
                }
            }
            serde_json::Value::Array(a) => a.iter_mut().for_each(walk),
            serde_json::Value::Object(o) => o.values_mut().for_each(walk),
            _ => {}
        }
    }
    let mut value = serde_json::to_value(v)?;
    walk(&mut value);
    Ok(value)
}

pub fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&rounded_json(v)?)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_summary(path: &Path, summary: &MetricsSummary) -> Result<()> {
    write_json(path, summary)
}

/// Writes every output of `run` into `dir`, creating it if needed.
pub fn write_run(dir: &Path, sc: &Scenario, run: &RunResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_epochs(&dir.join("epochs.csv"), sc.model, &run.log)?;
    write_candidates(&dir.join("candidates.csv"), &run.log)?;
    write_trajectory(&dir.join("trajectory.csv"), sc.model, &run.log)?;
    write_bounds(&dir.join("bounds.csv"), sc.model, &run.log)?;
    write_summary(&dir.join("summary.json"), &run.summary)?;
    fs::write(dir.join("scenario.json"), serde_json::to_string_pretty(sc)? + "\n")?;
    Ok(())
}
