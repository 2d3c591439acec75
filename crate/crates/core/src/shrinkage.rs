//! Predicting how much a candidate segment will shrink the parameter box,
//! before committing to it.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linprog::min_l1_preimage;
use crate::models::{regression_tuples, steps_for, ModelSpec, Policy, Simulator, TrajTag, Trajectory};
use crate::seeding;
use crate::smid::{avg_width_reduction, smid_update, DirectionSet, ParameterBox};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Rollout,
    Consistency,
}

/// How per-rollout reductions are pooled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    Mean,
    /// Lower quantile in `[0, 1]`, a pessimistic alternative to the mean.
    Quantile(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShrinkagePrediction {
    pub delta_xi: f64,
    pub per_rollout: Vec<f64>,
    pub method: PredictorKind,
    /// Rollouts that blew up and were scored as zero.
    pub flagged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutSettings {
    pub n_rollouts: usize,
    pub aggregate: Aggregate,
}

impl Default for RolloutSettings {
    fn default() -> Self {
        Self {
            n_rollouts: 20,
            aggregate: Aggregate::Mean,
        }
    }
}

fn pool(values: &[f64], aggregate: Aggregate) -> f64 {
    match aggregate {
        Aggregate::Mean => values.iter().sum::<f64>() / values.len() as f64,
        Aggregate::Quantile(q) => {
            let mut v = values.to_vec();
            v.sort_by(f64::total_cmp);
            let idx = ((v.len() - 1) as f64 * q.clamp(0.0, 1.0)).floor() as usize;
            v[idx]
        }
    }
}

/// Window length and slack used to turn simulated data into bound updates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionSetup {
    pub window: f64,
    pub eps: f64,
}

/// Simulates the candidate from `x_k` under parameters drawn from `bx` and
/// fresh disturbance, runs the bound update on each rollout's data alone and
/// pools the resulting width reductions.
#[allow(clippy::too_many_arguments)]
pub fn predict_rollout(
    model: &ModelSpec,
    policy: &dyn Policy,
    x_k: &[f64],
    t_k: f64,
    horizon: f64,
    bx: &ParameterBox,
    dirs: &DirectionSet,
    regression: RegressionSetup,
    settings: &RolloutSettings,
    seed: u64,
) -> Result<ShrinkagePrediction> {
    let mut out = predict_rollout_horizons(model, policy, x_k, t_k, &[horizon], bx, dirs, regression, settings, seed)?;
    Ok(out.remove(0))
}

/// [`predict_rollout`] for every prefix horizon of one policy, sharing the
/// rollouts: each prefix sees exactly the samples a separate call would.
#[allow(clippy::too_many_arguments)]
pub fn predict_rollout_horizons(
    model: &ModelSpec,
    policy: &dyn Policy,
    x_k: &[f64],
    t_k: f64,
    horizons: &[f64],
    bx: &ParameterBox,
    dirs: &DirectionSet,
    regression: RegressionSetup,
    settings: &RolloutSettings,
    seed: u64,
) -> Result<Vec<ShrinkagePrediction>> {
    if settings.n_rollouts == 0 {
        return Err(Error::Contract("at least one rollout is required".into()));
    }
    if horizons.is_empty() {
        return Ok(Vec::new());
    }
    let steps: Vec<usize> = horizons.iter().map(|&h| steps_for(h, model.dt)).collect();
    let longest = *steps.iter().max().unwrap();
    let outcomes: Vec<Result<Option<Vec<f64>>>> = (0..settings.n_rollouts)
        .into_par_iter()
        .map(|l| {
            let mut rng = seeding::rng(seeding::derive_seed(seed, l as u64));
            let theta = bx.sample_uniform(&mut rng);
            let sim = Simulator::new(model, theta.as_slice());
            let traj = match sim.record(policy, x_k, t_k, longest, &mut rng, TrajTag::Executed) {
                Ok(t) => t,
                Err(Error::NumericalBlowup { .. }) | Err(Error::PolicyFailure { .. }) => {
                    return Ok(None)
                }
                Err(e) => return Err(e),
            };
            let mut reductions = Vec::with_capacity(steps.len());
            for &n in &steps {
                let prefix = traj.restrict(t_k, t_k + n as f64 * model.dt);
                let tuples = regression_tuples(model, &prefix, regression.window)?;
                let post = smid_update(bx, &tuples, regression.eps)?;
                reductions.push(avg_width_reduction(bx, &post.bounds, dirs)?);
            }
            Ok(Some(reductions))
        })
        .collect();
    let mut per_horizon = vec![Vec::with_capacity(outcomes.len()); horizons.len()];
    let mut flagged = 0;
    for o in outcomes {
        match o? {
            Some(v) => {
                for (acc, r) in per_horizon.iter_mut().zip(v) {
                    acc.push(r);
                }
            }
            None => {
                flagged += 1;
                per_horizon.iter_mut().for_each(|acc| acc.push(0.0));
            }
        }
    }
    Ok(per_horizon
        .into_iter()
        .map(|per_rollout| ShrinkagePrediction {
            delta_xi: pool(&per_rollout, settings.aggregate),
            per_rollout,
            method: PredictorKind::Rollout,
            flagged,
        })
        .collect())
}

/// Regressor rows sampled along a planned trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedRegressor {
    pub a: DMatrix<f64>,
}

impl StackedRegressor {
    /// Whether offset `e` is indistinguishable from zero: `|A e|_inf <= 2 w_bar`.
    pub fn indistinguishable(&self, e: &DVector<f64>, wbar: f64) -> bool {
        (&self.a * e).amax() <= 2.0 * wbar
    }

    /// Support function of the indistinguishable-offset set along `d`, or
    /// `None` when the set is unbounded along `d`.
    pub fn support(&self, d: &DVector<f64>, wbar: f64) -> Result<Option<f64>> {
        Ok(min_l1_preimage(&self.a, d)?.map(|s| 2.0 * wbar * s.l1))
    }
}

/// Stacks `Phi(x_j, u_j)` at every `stride`-th sample; the final state reuses
/// the last input.
pub fn stack_regressor(model: &ModelSpec, planned: &Trajectory, stride: usize) -> Result<StackedRegressor> {
    if stride == 0 {
        return Err(Error::Contract("stride must be at least 1".into()));
    }
    if planned.inputs.is_empty() {
        return Err(Error::InsufficientData("planned trajectory has no inputs".into()));
    }
    let (n, p) = (model.n(), model.p());
    let idx: Vec<usize> = (0..planned.len()).step_by(stride).collect();
    let mut a = DMatrix::zeros(idx.len() * n, p);
    for (b, &j) in idx.iter().enumerate() {
        let u = &planned.inputs[j.min(planned.inputs.len() - 1)];
        let phi = model.regressor_matrix(planned.states[j].as_slice(), u.as_slice());
        a.view_mut((b * n, 0), (n, p)).copy_from(&phi);
    }
    Ok(StackedRegressor { a })
}

/// Predicted post-update width `min(w_d, 2 h(d))` per direction, where `h` is
/// the support of the indistinguishable-offset set. Ignores tracking error.
pub fn predict_consistency(
    stacked: &StackedRegressor,
    wbar: f64,
    bx: &ParameterBox,
    dirs: &DirectionSet,
) -> Result<ShrinkagePrediction> {
    if !(wbar >= 0.0) {
        return Err(Error::Contract("disturbance bound must be non-negative".into()));
    }
    let before = dirs.widths(bx);
    let after = consistency_widths(stacked, wbar, bx, dirs)?;
    let total: f64 = before.iter().zip(&after).map(|(b, a)| b - a).sum();
    Ok(ShrinkagePrediction {
        delta_xi: total / dirs.len() as f64,
        per_rollout: Vec::new(),
        method: PredictorKind::Consistency,
        flagged: 0,
    })
}

/// Predicted post-update widths, one per direction.
pub fn consistency_widths(
    stacked: &StackedRegressor,
    wbar: f64,
    bx: &ParameterBox,
    dirs: &DirectionSet,
) -> Result<Vec<f64>> {
    dirs.dirs()
        .iter()
        .map(|d| {
            let w = bx.width(d)?;
            Ok(match stacked.support(d, wbar)? {
                Some(h) => w.min(2.0 * h),
                None => w,
            })
        })
        .collect()
}
