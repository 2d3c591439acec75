//! Single mission runs with budget resolution.

use dgk::engine::log::MissionLog;
use dgk::engine::Method;

use crate::metrics::MetricsSummary;
use crate::scenario::{Budget, Scenario};
use crate::{BenchError, Result};

pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub theta_planned: Option<f64>,
    pub log: MissionLog,
    pub summary: MetricsSummary,
}

/// Cost of the scenario's baseline method on `seed`.
pub fn compute_baseline_cost(sc: &Scenario, seed: u64, theta_planned: Option<f64>) -> Result<f64> {
    let log = execute(sc, sc.baseline_method(), seed, 0.0, theta_planned)?;
    let cost = log.outcome.total_cost;
    if !(cost.is_finite() && cost > 0.0) {
        return Err(BenchError::Invalid(format!(
            "baseline cost {cost} cannot normalize a relative budget"
        )));
    }
    Ok(cost)
}

fn execute(sc: &Scenario, method: Method, seed: u64, budget: f64, theta_planned: Option<f64>) -> Result<MissionLog> {
    if sc.model.is_quad() {
        Ok(sc.quad_mission(budget)?.run(method, seed)?)
    } else {
        Ok(sc.race_mission(budget, theta_planned)?.run(method, seed)?)
    }
}

/// Runs `method` on `seed`. `trial` selects the planned-friction grid entry
/// in sweeps; `None` uses the scenario's own guess.
pub fn run_scenario(sc: &Scenario, method: Method, seed: u64, trial: Option<usize>) -> Result<RunResult> {
    sc.check_method(method)?;
    let theta_planned = sc.theta_planned(trial);
    let baseline_cost = compute_baseline_cost(sc, seed, theta_planned)?;
    let budget = match sc.budget {
        Budget::Absolute(b) => b,
        Budget::PctOfBaseline(p) => p / 100.0 * baseline_cost,
    };
    let log = execute(sc, method, seed, budget, theta_planned)?;
    let summary = MetricsSummary::new(sc, &log, baseline_cost);
    Ok(RunResult {
        method,
        seed,
        theta_planned,
        log,
        summary,
    })
}
