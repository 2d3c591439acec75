//! Gatekeeper-style mission loop for the racing car: candidate policies run
//! for a horizon and hand over to the fallback, rollout verification decides
//! which may be committed.

use std::ops::ControlFlow;
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::log::{BoundsSample, EpochRecord, MissionLog, OutcomeExtra, Recorder};
use super::{candidate_horizons, commit_lazy, learn_from, BudgetLedger, CandidateRecord, Choice, EngineConfig, LearningConfig, Method};
use crate::constraints::StateSet;
use crate::error::{Error, Result};
use crate::models::{steps_for, ModelSpec, Policy, Simulator, TrajTag, Trajectory};
use crate::planners::car::{RacingPlan, RacingPlanner, RacingPlannerConfig};
use crate::racing::{Track, TrackCorridor};
use crate::seeding::{derive_seed, derive_seed2, rng};
use crate::shrinkage::{predict_rollout_horizons, RegressionSetup, RolloutSettings};
use crate::smid::{DirectionSet, ParameterBox};
use crate::verify::{verify_policy, FallbackSpec, SafetyVerdict, VerifySettings};

/// Fallback controller and the set it must reach.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FallbackConfig {
    pub speed: f64,
    /// How long the fallback runs after a candidate during verification (s).
    pub duration: f64,
    /// Fallback set half-width as a fraction of the track half-width.
    pub set_fraction: f64,
}

impl Default for FallbackConfig {
    fn default() -> Self {
        Self {
            speed: 2.8,
            duration: 4.0,
            set_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RaceMission {
    pub model: ModelSpec,
    pub track: Arc<Track>,
    /// Arc length and speed at the start line.
    pub start_s: f64,
    pub start_speed: f64,
    pub initial_box: ParameterBox,
    /// Friction guess the planners start from; the box midpoint when absent.
    pub theta_planned: Option<f64>,
    pub laps: usize,
    pub time_limit: f64,
    pub planner: RacingPlannerConfig,
    pub engine: EngineConfig,
    pub verify: VerifySettings,
    pub fallback: FallbackConfig,
    /// Fixed backup horizon; candidates are its prefixes.
    pub backup_horizon: f64,
    /// Steering-angle bound of the state constraint.
    pub steer_max: f64,
    pub learning: LearningConfig,
    /// Absolute exploration budget.
    pub budget: f64,
}

const TRUE_WORLD: u64 = 1;
const NOMINAL: u64 = 2;
const INFORMATIVE: u64 = 3;
const SHRINKAGE: u64 = 4;
const VERIFY_INFO: u64 = 5;
const VERIFY_CONS: u64 = 6;

/// Progress bookkeeping along the executed run.
struct LapCounter {
    s: f64,
    progress: f64,
    length: f64,
    last_crossing: f64,
    times: Vec<f64>,
}

impl LapCounter {
    fn new(s: f64, t: f64, length: f64) -> Self {
        Self {
            s,
            progress: 0.0,
            length,
            last_crossing: t,
            times: Vec::new(),
        }
    }

    fn advance(&mut self, track: &Track, s: f64, t_prev: f64, t: f64) {
        let ds = track.progress_delta(self.s, s);
        let before = self.progress;
        self.progress += ds;
        self.s = s;
        let target = (self.times.len() + 1) as f64 * self.length;
        if before < target && self.progress >= target {
            let frac = if ds > 0.0 { (target - before) / ds } else { 1.0 };
            let crossing = t_prev + frac * (t - t_prev);
            self.times.push(crossing - self.last_crossing);
            self.last_crossing = crossing;
        }
    }
}

/// Drops the first `knots` knots of a warm start and pads with zeros.
fn shift(z: &[f64], knots: usize) -> Vec<f64> {
    let drop = (2 * knots).min(z.len());
    let mut out = z[drop..].to_vec();
    out.resize(z.len(), 0.0);
    out
}

impl RaceMission {
    pub fn validate(&self) -> Result<()> {
        self.engine.validate()?;
        self.verify.validate()?;
        if self.model.p() != 1 {
            return Err(Error::Config("racing mission expects a single friction parameter".into()));
        }
        if !self.initial_box.contains(&self.model.true_theta) {
            return Err(Error::Config("true friction must lie in the initial box".into()));
        }
        if self.laps == 0 || !(self.time_limit > 0.0) || !(self.backup_horizon > 0.0) {
            return Err(Error::Config("racing needs laps >= 1, a positive time limit and backup horizon".into()));
        }
        if !(self.fallback.speed > 0.0 && self.fallback.duration > 0.0) {
            return Err(Error::Config("fallback speed and duration must be positive".into()));
        }
        if !(self.fallback.set_fraction > 0.0 && self.fallback.set_fraction <= 1.0) {
            return Err(Error::Config("fallback set fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn planner(&self) -> Result<RacingPlanner> {
        let mut cfg = self.planner.clone();
        cfg.horizon = self.backup_horizon;
        RacingPlanner::new(self.model.clone(), self.track.clone(), cfg)
    }

    pub fn corridor(&self) -> TrackCorridor {
        TrackCorridor {
            track: self.track.clone(),
            lateral_limit: self.track.half_width(),
            steer_max: self.steer_max,
        }
    }

    fn guess(&self, bx: &ParameterBox) -> f64 {
        let mid = bx.midpoint()[0];
        self.theta_planned.unwrap_or(mid)
    }

    /// Slack for the bound update. Each probe is a noise-free closed-loop
    /// lap segment driven at the friction it was planned for (fallback and
    /// reference pursuit at the box ends and midpoint), calibrated at that
    /// friction alone; open-loop replays at other frictions leave the track.
    fn resolve_eps(&self, planner: &RacingPlanner, x0: &[f64]) -> Result<f64> {
        if self.learning.eps.is_some() {
            return self.learning.resolve_eps(&self.model, &[], &self.initial_box);
        }
        let mut quiet = self.model.clone();
        quiet.disturbance_bound = 0.0;
        let params = planner.car_params();
        let steps = steps_for(self.backup_horizon, self.model.dt);
        let (lo, hi) = (self.initial_box.lo()[0], self.initial_box.hi()[0]);
        let mut eps = 0.0f64;
        for mu in [lo, 0.5 * (lo + hi), hi] {
            for policy in [planner.fallback(&params, self.fallback.speed), planner.reference(&params, mu)] {
                let probe = match Simulator::new(&quiet, &[mu]).record(&policy, x0, 0.0, steps, &mut rng(0), TrajTag::Executed) {
                    Ok(p) => p,
                    Err(Error::NumericalBlowup { .. }) => continue,
                    Err(e) => return Err(e),
                };
                let point = ParameterBox::from_slices(&[mu], &[mu])?;
                eps = eps.max(self.learning.resolve_eps(&self.model, &[probe], &point)?);
            }
        }
        Ok(eps)
    }

    pub fn run(&self, method: Method, seed: u64) -> Result<MissionLog> {
        if method == Method::Baseline {
            return Err(Error::Config("method 'baseline' is not defined for racing; use 'fallback'".into()));
        }
        self.validate()?;
        let planner = self.planner()?;
        let model = &self.model;
        let dt = model.dt;
        let track = &self.track;
        let params = planner.car_params();
        let corridor = self.corridor();
        let fallback_policy = Arc::new(planner.fallback(&params, self.fallback.speed));
        let fallback = FallbackSpec {
            policy: fallback_policy.clone(),
            duration: self.fallback.duration,
            set: Arc::new(TrackCorridor {
                track: track.clone(),
                lateral_limit: self.fallback.set_fraction * track.half_width(),
                steer_max: self.steer_max,
            }),
        };
        let v_max = planner.cfg.v_max;
        let seg_cost = |a: &[f64], b: &[f64], h: f64| {
            let (sa, sb) = (track.frame_of(a).s, track.frame_of(b).s);
            h - track.progress_delta(sa, sb) / v_max
        };
        let dirs = DirectionSet::axes(1);
        let knot = planner.cfg.knot;

        let mut ledger = BudgetLedger::new(if method.uses_ledger() { self.budget } else { 0.0 })?;
        let mut bx = self.initial_box.clone();
        let mut world = rng(derive_seed(seed, TRUE_WORLD));
        let x0 = track.start_state(self.start_s, self.start_speed).to_vec();
        let mut rec = Recorder::new(&x0, 0.0, &bx);
        let mut laps = LapCounter::new(self.start_s, 0.0, track.length());
        let mut x = x0.clone();
        let mut t = 0.0;
        let mut warm_nom: Option<Vec<f64>> = None;
        let mut warm_info: Option<Vec<f64>> = None;
        let eps = if method.learns() {
            self.resolve_eps(&planner, &x0)?
        } else {
            f64::NAN
        };
        let mut extra = OutcomeExtra::default();
        let mut k = 0usize;

        while laps.times.len() < self.laps && t < self.time_limit - 0.5 * dt && rec.first_violation.is_none() {
            let mut note = String::new();
            let theta_hat = match method {
                Method::Nominal | Method::Weighted => self.guess(&self.initial_box),
                _ => self.guess(&bx).clamp(bx.lo()[0], bx.hi()[0]),
            };
            let horizons = candidate_horizons(self.backup_horizon, self.engine.t_c)?;
            let t_c = horizons[0];
            let mut records: Vec<CandidateRecord> = Vec::new();
            let verify = |policy: Arc<dyn Policy>, h: f64, stream: u64, j: usize| -> Result<SafetyVerdict> {
                verify_policy(
                    model,
                    policy,
                    h,
                    &x,
                    t,
                    &bx,
                    &corridor,
                    &fallback,
                    &self.verify,
                    derive_seed2(seed, stream, (k * 64 + j) as u64),
                    Some(&seg_cost),
                )
            };

            // Committed policy, its duration and tag, plus record fields.
            let (policy, horizon, tag, index, delta_xi, score, charge): (Arc<dyn Policy>, f64, TrajTag, Option<usize>, f64, f64, f64) =
                match method {
                    Method::Fallback => (fallback_policy.clone(), t_c, TrajTag::Fallback, None, 0.0, 0.0, 0.0),
                    Method::Nominal | Method::Weighted => {
                        let (plan, z) = self.plan(&planner, method == Method::Weighted, &x, t, theta_hat, &warm_nom, seed, k)?;
                        warm_nom = Some(z);
                        let tag = if method == Method::Weighted { TrajTag::Informative } else { TrajTag::Nominal };
                        (plan.policy.clone(), t_c, tag, Some(1), 0.0, 0.0, 0.0)
                    }
                    Method::NominalGk | Method::WeightedGk => {
                        let weighted = method == Method::WeightedGk;
                        let (plan, z) = self.plan(&planner, weighted, &x, t, theta_hat, &warm_nom, seed, k)?;
                        warm_nom = Some(z);
                        let verdict = verify(plan.policy.clone(), t_c, VERIFY_CONS, 1)?;
                        let mut r = CandidateRecord::new(1, t_c, 0.0, self.engine.lambda);
                        r.evaluate(verdict.accepted, verdict.p_safe, verdict.mean_cost, verdict.mean_cost);
                        records.push(r);
                        if verdict.accepted {
                            let tag = if weighted { TrajTag::Informative } else { TrajTag::Nominal };
                            (plan.policy.clone(), t_c, tag, Some(1), 0.0, 0.0, 0.0)
                        } else {
                            (fallback_policy.clone(), t_c, TrajTag::Fallback, None, 0.0, 0.0, 0.0)
                        }
                    }
                    Method::DualGatekeeper => {
                        let (cons, zc) = self.plan(&planner, false, &x, t, theta_hat, &warm_nom, seed, k)?;
                        let (info, zi) = self.plan(&planner, true, &x, t, theta_hat, &warm_info, seed, k)?;
                        warm_nom = Some(zc);
                        warm_info = Some(zi);
                        let predictions = predict_rollout_horizons(
                            model,
                            info.policy.as_ref(),
                            &x,
                            t,
                            &horizons,
                            &bx,
                            &dirs,
                            RegressionSetup {
                                window: self.learning.window,
                                eps,
                            },
                            &RolloutSettings {
                                n_rollouts: self.engine.n_shrinkage_rollouts,
                                aggregate: self.engine.aggregate,
                            },
                            derive_seed2(seed, SHRINKAGE, k as u64),
                        )?;
                        for (j, (&h, p)) in horizons.iter().zip(&predictions).enumerate() {
                            records.push(CandidateRecord::new(j + 1, h, p.delta_xi, self.engine.lambda));
                        }
                        let mut cons_cache: Vec<Option<SafetyVerdict>> = vec![None; horizons.len()];
                        let decision = commit_lazy(&mut records, &mut ledger, t, |r| {
                            let j = r.index - 1;
                            let vi = verify(info.policy.clone(), r.horizon, VERIFY_INFO, j)?;
                            if cons_cache[j].is_none() {
                                cons_cache[j] = Some(verify(cons.policy.clone(), r.horizon, VERIFY_CONS, j)?);
                            }
                            let vc = cons_cache[j].as_ref().unwrap();
                            let valid = vi.accepted && vc.accepted;
                            r.evaluate(valid, vi.p_safe.min(vc.p_safe), vi.mean_cost, vc.mean_cost);
                            Ok(())
                        })?;
                        match decision.choice {
                            Choice::Informative(j) => (
                                info.policy.clone(),
                                records[j].horizon,
                                TrajTag::Informative,
                                Some(records[j].index),
                                records[j].delta_xi,
                                records[j].score,
                                decision.charge,
                            ),
                            Choice::Conservative => {
                                let accepted = match &cons_cache[0] {
                                    Some(v) => v.accepted,
                                    None => verify(cons.policy.clone(), t_c, VERIFY_CONS, 0)?.accepted,
                                };
                                if accepted {
                                    (cons.policy.clone(), t_c, TrajTag::Conservative, None, 0.0, 0.0, 0.0)
                                } else {
                                    (fallback_policy.clone(), t_c, TrajTag::Fallback, None, 0.0, 0.0, 0.0)
                                }
                            }
                        }
                    }
                    Method::Baseline => unreachable!(),
                };
            if !method.uses_ledger() {
                ledger.charge(t, 0.0)?;
            }

            let steps = steps_for(horizon, dt).min(steps_for(self.time_limit - t, dt)).max(1);
            let segment = self.execute(policy.as_ref(), &x, t, steps, &mut world, &mut rec, &mut laps, &mut note)?;
            rec.append(&segment, tag);
            if method.learns() && !segment.inputs.is_empty() {
                let (next, consistent) = learn_from(model, &bx, &segment, self.learning.window, eps)?;
                if !consistent {
                    note.push_str(if note.is_empty() { "inconsistent data" } else { "; inconsistent data" });
                }
                bx = next;
            }
            let executed_knots = (segment.duration() / knot).round() as usize;
            warm_nom = warm_nom.map(|z| shift(&z, executed_knots));
            warm_info = warm_info.map(|z| shift(&z, executed_knots));
            t = segment.end_time();
            x = segment.final_state().iter().copied().collect();
            rec.bounds.push(BoundsSample::of(t, &bx));
            rec.epochs.push(EpochRecord {
                k,
                t: segment.start_time(),
                committed: tag,
                index,
                horizon: segment.duration(),
                delta_xi,
                score,
                charge,
                spent: ledger.spent(),
                n_candidates: records.len(),
                n_valid: records.iter().filter(|r| r.valid == Some(true)).count(),
                lo: bx.lo().iter().copied().collect(),
                hi: bx.hi().iter().copied().collect(),
                note,
                candidates: records,
            });
            k += 1;
        }
        extra.goal_reached = rec.first_violation.is_none() && laps.times.len() >= self.laps;
        extra.lap_times = laps.times;
        let ledger_ref = method.uses_ledger().then_some(&ledger);
        Ok(rec.finish(method, ledger_ref, &self.initial_box, &bx, extra))
    }

    #[allow(clippy::too_many_arguments)]
    fn plan(
        &self,
        planner: &RacingPlanner,
        informative: bool,
        x: &[f64],
        t: f64,
        mu: f64,
        warm: &Option<Vec<f64>>,
        seed: u64,
        k: usize,
    ) -> Result<(RacingPlan, Vec<f64>)> {
        if informative {
            planner.plan_informative(x, t, mu, warm.as_deref(), derive_seed2(seed, INFORMATIVE, k as u64))
        } else {
            planner.plan_nominal(x, t, mu, warm.as_deref(), derive_seed2(seed, NOMINAL, k as u64))
        }
    }

    /// Runs `policy` on the true car, stopping at the first corridor
    /// violation or numerical blowup; accumulates cost and lap crossings.
    #[allow(clippy::too_many_arguments)]
    fn execute(
        &self,
        policy: &dyn Policy,
        x: &[f64],
        t: f64,
        steps: usize,
        world: &mut rand_chacha::ChaCha8Rng,
        rec: &mut Recorder,
        laps: &mut LapCounter,
        note: &mut String,
    ) -> Result<Trajectory> {
        let model = &self.model;
        let track = &self.track;
        let corridor = self.corridor();
        let v_max = self.planner.v_max;
        let mut seg = Trajectory::new(DVector::from_column_slice(x), t, TrajTag::Executed);
        let mut t_prev = t;
        let end = Simulator::new(model, model.true_theta.as_slice()).run(policy, x, t, steps, world, |_, t_next, xn, u| {
            seg.push(DVector::from_column_slice(u), t_next, DVector::from_column_slice(xn));
            let s_before = laps.s;
            let s = track.frame_of(xn).s;
            laps.advance(track, s, t_prev, t_next);
            rec.cost += (t_next - t_prev) - track.progress_delta(s_before, s) / v_max;
            t_prev = t_next;
            if corridor.violation(xn, &[]) > 0.0 {
                rec.first_violation = Some(t_next);
                return ControlFlow::Break(());
            }
            if laps.times.len() >= self.laps {
                return ControlFlow::Break(());
            }
            ControlFlow::Continue(())
        });
        match end {
            Ok(_) => {}
            Err(Error::NumericalBlowup { t }) | Err(Error::PolicyFailure { t }) => {
                rec.first_violation.get_or_insert(t);
                note.push_str("simulation blew up");
            }
            Err(e) => return Err(e),
        }
        Ok(seg)
    }
}
