//! Monte-Carlo safety verification of candidate policies and tube validity
//! checks for informative segments.

use std::ops::ControlFlow;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::StateSet;
use crate::error::{Error, Result};
use crate::models::{steps_for, Bounds, ModelSpec, Policy, Trajectory};
use crate::planners::tracking::{estimate_tube, SwitchedPolicy, TrackingLaw, Tube, TubeConfig};
use crate::seeding;
use crate::smid::ParameterBox;

/// What runs after the candidate and where it must end up.
#[derive(Clone)]
pub struct FallbackSpec {
    pub policy: Arc<dyn Policy>,
    pub duration: f64,
    pub set: Arc<dyn StateSet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySettings {
    pub n_rollouts: usize,
    /// Risk tolerance: accept iff the safe fraction is at least `1 - delta`.
    pub delta: f64,
    /// Rollouts per batch; verification stops once rejection is certain.
    pub chunk: usize,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            n_rollouts: 200,
            delta: 0.05,
            chunk: 50,
        }
    }
}

impl VerifySettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_rollouts == 0 || !(self.delta > 0.0 && self.delta < 1.0) || self.chunk == 0 {
            return Err(Error::Config("verification needs n >= 1, chunk >= 1 and delta in (0, 1)".into()));
        }
        Ok(())
    }

    /// Acceptance rule on a completed count.
    pub fn accepts(&self, n_safe: usize, n_rollouts: usize) -> bool {
        n_rollouts == self.n_rollouts && n_safe as f64 >= (1.0 - self.delta) * n_rollouts as f64 - 1e-9
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureCounts {
    pub state: usize,
    pub input: usize,
    pub terminal: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetyVerdict {
    pub p_safe: f64,
    /// Rollouts actually run; below the requested count after early rejection.
    pub n_rollouts: usize,
    pub n_safe: usize,
    pub accepted: bool,
    pub failures: FailureCounts,
    /// Mean of the segment cost over the candidate part of every rollout.
    pub mean_cost: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Outcome {
    Safe,
    State,
    Input,
    Terminal,
}

/// Raw-command check before the simulator saturates inputs.
struct InputGuard<'a> {
    inner: &'a dyn Policy,
    bounds: &'a Bounds,
    violated: AtomicBool,
}

impl Policy for InputGuard<'_> {
    fn control(&self, t: f64, x: &[f64], u: &mut [f64]) {
        self.inner.control(t, x, u);
        if self.bounds.violation(u, &[]) > 1e-9 {
            self.violated.store(true, Ordering::Relaxed);
        }
    }
}

/// Per-step cost increment `(x_prev, x_next, dt)` of the candidate segment.
pub type SegmentCost<'a> = &'a (dyn Fn(&[f64], &[f64], f64) -> f64 + Sync);

/// Runs the candidate for `horizon` then the fallback for its duration under
/// `theta ~ U(box)` and fresh disturbance. A rollout is safe iff the state
/// stays in `constraints`, no raw command leaves the input bounds, and the
/// final state lies in the fallback set.
#[allow(clippy::too_many_arguments)]
pub fn verify_policy(
    model: &ModelSpec,
    candidate: Arc<dyn Policy>,
    horizon: f64,
    x_k: &[f64],
    t_k: f64,
    bx: &ParameterBox,
    constraints: &dyn StateSet,
    fallback: &FallbackSpec,
    settings: &VerifySettings,
    seed: u64,
    cost: Option<SegmentCost<'_>>,
) -> Result<SafetyVerdict> {
    settings.validate()?;
    if !(fallback.duration > 0.0) {
        return Err(Error::Config("fallback duration must be positive".into()));
    }
    let seg_steps = steps_for(horizon, model.dt);
    let steps = seg_steps + steps_for(fallback.duration, model.dt);
    let switched = SwitchedPolicy {
        first: candidate,
        switch_time: t_k + seg_steps as f64 * model.dt,
        then: fallback.policy.clone(),
    };
    let n = model.n();
    let run_one = |l: usize| -> (Outcome, f64) {
        let mut rng = seeding::rng(seeding::derive_seed(seed, l as u64));
        let theta = bx.sample_uniform(&mut rng);
        let guard = InputGuard {
            inner: &switched,
            bounds: &model.input_bounds,
            violated: AtomicBool::new(false),
        };
        let mut outcome = Outcome::Safe;
        let mut seg_cost = 0.0;
        let mut prev = x_k.to_vec();
        let end = crate::models::Simulator::new(model, theta.as_slice()).run(&guard, x_k, t_k, steps, &mut rng, |k, _, x, _| {
            if k < seg_steps {
                if let Some(c) = cost {
                    seg_cost += c(&prev, x, model.dt);
                }
                prev.copy_from_slice(&x[..n]);
            }
            if guard.violated.load(Ordering::Relaxed) {
                outcome = Outcome::Input;
                return ControlFlow::Break(());
            }
            if constraints.violation(x, &[]) > 0.0 {
                outcome = Outcome::State;
                return ControlFlow::Break(());
            }
            if k + 1 == steps && !fallback.set.contains(x) {
                outcome = Outcome::Terminal;
            }
            ControlFlow::Continue(())
        });
        if end.is_err() {
            outcome = Outcome::State;
        }
        (outcome, seg_cost)
    };

    let mut outcomes = Vec::with_capacity(settings.n_rollouts);
    let budget = settings.delta * settings.n_rollouts as f64;
    let mut start = 0;
    while start < settings.n_rollouts {
        let end = (start + settings.chunk).min(settings.n_rollouts);
        let batch: Vec<(Outcome, f64)> = (start..end).into_par_iter().map(run_one).collect();
        outcomes.extend(batch);
        start = end;
        let failed = outcomes.iter().filter(|o| o.0 != Outcome::Safe).count();
        if failed as f64 > budget + 1e-9 {
            break;
        }
    }

    let mut failures = FailureCounts::default();
    for (o, _) in &outcomes {
        match o {
            Outcome::Safe => {}
            Outcome::State => failures.state += 1,
            Outcome::Input => failures.input += 1,
            Outcome::Terminal => failures.terminal += 1,
        }
    }
    let done = outcomes.len();
    let n_safe = outcomes.iter().filter(|o| o.0 == Outcome::Safe).count();
    Ok(SafetyVerdict {
        p_safe: n_safe as f64 / done as f64,
        n_rollouts: done,
        n_safe,
        accepted: settings.accepts(n_safe, done),
        failures,
        mean_cost: outcomes.iter().map(|o| o.1).sum::<f64>() / done as f64,
    })
}

#[derive(Clone, Debug)]
pub struct TubeVerdict {
    pub valid: bool,
    pub tube: Tube,
    /// Largest tightened-constraint violation; `<= 0` when valid.
    pub violation: f64,
}

/// Sampled tube around an informative trajectory; valid iff the nominal
/// stays inside the state set and input bounds shrunk by the tube.
pub fn verify_tube_candidate(
    model: &ModelSpec,
    informative: &Arc<Trajectory>,
    law: &Arc<dyn TrackingLaw>,
    bx: &ParameterBox,
    set: &dyn StateSet,
    cfg: &TubeConfig,
    seed: u64,
) -> Result<TubeVerdict> {
    let tube = estimate_tube(model, informative, law, bx, cfg, seed)?;
    let violation = tube.tightened_violation(informative, set, &model.input_bounds);
    Ok(TubeVerdict {
        valid: violation <= 0.0,
        tube,
        violation,
    })
}
