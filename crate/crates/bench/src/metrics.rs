//! Per-run summary metrics.

use dgk::engine::log::MissionLog;
use serde::{Deserialize, Serialize};

use crate::scenario::Scenario;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub scenario: String,
    pub method: String,
    pub total_cost: f64,
    pub baseline_cost: f64,
    /// Total cost as a percentage of the baseline cost.
    pub cost_pct: f64,
    pub param_names: Vec<String>,
    /// Per-parameter width reduction of the final box relative to the initial one.
    pub uncertainty_reduction_pct: Vec<f64>,
    pub budget: Option<f64>,
    pub budget_consumed_pct: Option<f64>,
    pub safe_run: bool,
    pub success: bool,
    pub laps: usize,
    pub lap_times: Vec<f64>,
    pub first_lap_time: Option<f64>,
    pub last_lap_time: Option<f64>,
    pub true_theta: Vec<f64>,
    pub final_lo: Vec<f64>,
    pub final_hi: Vec<f64>,
    pub informative_commits: usize,
    pub aborted: Option<String>,
    pub duration: f64,
}

pub fn reduction_pct(initial: (f64, f64), last: (f64, f64)) -> f64 {
    let w0 = initial.1 - initial.0;
    if w0 <= 0.0 {
        return 0.0;
    }
    100.0 * (1.0 - (last.1 - last.0) / w0)
}

impl MetricsSummary {
    pub fn new(sc: &Scenario, log: &MissionLog, baseline_cost: f64) -> Self {
        let o = &log.outcome;
        let uncertainty_reduction_pct = (0..o.final_lo.len())
            .map(|i| reduction_pct((o.initial_lo[i], o.initial_hi[i]), (o.final_lo[i], o.final_hi[i])))
            .collect();
        let budget_consumed_pct = match (o.spent, o.budget) {
            (Some(s), Some(b)) if b > 0.0 => Some(100.0 * s / b),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        Self {
            scenario: sc.name.clone(),
            method: log.method.name().to_string(),
            total_cost: o.total_cost,
            baseline_cost,
            cost_pct: 100.0 * o.total_cost / baseline_cost,
            param_names: sc.model.param_names().iter().map(|s| s.to_string()).collect(),
            uncertainty_reduction_pct,
            budget: o.budget,
            budget_consumed_pct,
            safe_run: o.safe,
            success: o.safe && o.goal_reached,
            laps: o.laps,
            lap_times: o.lap_times.clone(),
            first_lap_time: o.lap_times.first().copied(),
            last_lap_time: o.lap_times.last().copied(),
            true_theta: sc.true_theta.clone(),
            final_lo: o.final_lo.clone(),
            final_hi: o.final_hi.clone(),
            informative_commits: o.informative_commits,
            aborted: o.aborted.clone(),
            duration: o.duration,
        }
    }
}
