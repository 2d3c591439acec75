//! Racing policies: pure-pursuit fallback, a tracking law for planned car
//! trajectories, and sampling-based nominal and informative planners.

use std::ops::ControlFlow;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::tracking::TrackingLaw;
use super::{GramAccumulator, InfoObjective};
use crate::error::{Error, Result};
use crate::models::{steps_for, Bounds, ModelSpec, Policy, Simulator, TrajTag, Trajectory};
use crate::racing::{
    wrap_angle, CarParams, SpeedProfile, Track, BRAKE, DRIVE, OMEGA, PSI, PX, PY, STEER, STEER_RATE, VX, VY,
};
use crate::sampling::{minimize, SamplerConfig, SamplerKind, Search};
use crate::seeding;

const G: f64 = 9.81;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PursuitConfig {
    pub lookahead: f64,
    /// Extra lookahead per m/s of speed.
    pub lookahead_gain: f64,
    /// Steering-rate gain toward the pursuit angle (1/s).
    pub steer_gain: f64,
    /// Speed regulation gain (1/s).
    pub speed_gain: f64,
    pub steer_limit: f64,
}

impl Default for PursuitConfig {
    fn default() -> Self {
        Self {
            lookahead: 1.0,
            lookahead_gain: 0.4,
            steer_gain: 20.0,
            speed_gain: 2.0,
            steer_limit: 0.45,
        }
    }
}

/// Net longitudinal force split into drive and brake commands.
fn split_force(f: f64, u: &mut [f64]) {
    if f >= 0.0 {
        u[DRIVE] = f;
        u[BRAKE] = 0.0;
    } else {
        u[DRIVE] = 0.0;
        u[BRAKE] = f;
    }
}

/// Pure pursuit toward a lookahead point on the centerline with speed
/// regulation to a target profile.
#[derive(Clone, Debug)]
pub struct PurePursuit {
    pub track: Arc<Track>,
    pub params: CarParams,
    pub cfg: PursuitConfig,
    pub speed: Arc<SpeedProfile>,
    /// Commands are saturated into these; full braking is `lo[BRAKE]`.
    pub bounds: Bounds,
}

impl PurePursuit {
    /// Writes the command for state `x`; returns true when `x` is outside
    /// the corridor and the best-effort recovery (full braking) is used.
    pub fn command(&self, x: &[f64], u: &mut [f64]) -> bool {
        let f = self.track.frame_of(x);
        let v = x[VX].max(0.0);
        let look = self.cfg.lookahead + self.cfg.lookahead_gain * v;
        let target = self.track.point_at(f.s + look);
        let alpha = wrap_angle((target[1] - x[PY]).atan2(target[0] - x[PX]) - x[PSI]);
        let l = self.params.wheelbase();
        let steer = (2.0 * l * alpha.sin() / look).atan().clamp(-self.cfg.steer_limit, self.cfg.steer_limit);
        u[STEER_RATE] = self.cfg.steer_gain * (steer - x[STEER]);
        let recovering = f.e_y.abs() > self.track.half_width();
        if recovering {
            split_force(self.bounds.lo[BRAKE], u);
        } else {
            let p = &self.params;
            let resist = 0.5 * p.rho * p.a_front * p.c_d_aero * v * v * p.m + p.f_r * p.m * G;
            let f_net = p.m * self.cfg.speed_gain * (self.speed.at(f.s) - x[VX]) + resist;
            split_force(f_net, u);
        }
        self.bounds.clip(u);
        recovering
    }
}

impl Policy for PurePursuit {
    fn control(&self, _t: f64, x: &[f64], u: &mut [f64]) {
        self.command(x, u);
    }
}

/// Tracking law for planned car trajectories: lateral and heading errors in
/// the nominal's frame steer, speed and along-track errors drive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CarTracker {
    pub k_lat: f64,
    pub k_heading: f64,
    pub k_steer: f64,
    pub k_speed: f64,
    pub k_lon: f64,
    pub mass: f64,
}

impl Default for CarTracker {
    fn default() -> Self {
        Self {
            k_lat: 0.3,
            k_heading: 0.8,
            k_steer: 10.0,
            k_speed: 2.0,
            k_lon: 1.0,
            mass: CarParams::default().m,
        }
    }
}

impl TrackingLaw for CarTracker {
    fn command(&self, x: &[f64], x_nom: &[f64], u_nom: &[f64], u: &mut [f64]) {
        let (s, c) = x_nom[PSI].sin_cos();
        let (dx, dy) = (x[PX] - x_nom[PX], x[PY] - x_nom[PY]);
        let e_lat = -s * dx + c * dy;
        let e_lon = c * dx + s * dy;
        let e_psi = wrap_angle(x[PSI] - x_nom[PSI]);
        let steer_des = x_nom[STEER] - self.k_lat * e_lat - self.k_heading * e_psi;
        u[STEER_RATE] = u_nom[STEER_RATE] + self.k_steer * (steer_des - x[STEER]);
        let f = u_nom[DRIVE] + u_nom[BRAKE] + self.mass * (self.k_speed * (x_nom[VX] - x[VX]) - self.k_lon * e_lon);
        split_force(f, u);
    }
}

/// Weights of the racing stage cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RacingWeights {
    pub progress: f64,
    pub heading: f64,
    pub speed: f64,
    pub lateral_velocity: f64,
    pub yaw_rate: f64,
    pub force: f64,
    pub steer_rate: f64,
    pub input_change: f64,
    /// Penalty on lateral offset beyond `edge_frac` of the half-width.
    pub edge: f64,
    pub edge_frac: f64,
}

impl Default for RacingWeights {
    fn default() -> Self {
        Self {
            progress: 10.0,
            heading: 1.0,
            speed: 0.2,
            lateral_velocity: 0.5,
            yaw_rate: 0.05,
            force: 1e-3,
            steer_rate: 0.05,
            input_change: 1e-3,
            edge: 200.0,
            edge_frac: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RacingPlannerConfig {
    pub horizon: f64,
    pub knot: f64,
    /// Fraction of the estimated friction limit used by the speed profile.
    pub grip_frac: f64,
    pub v_max: f64,
    pub accel: f64,
    pub brake: f64,
    pub sampler: SamplerConfig,
    pub force_std: f64,
    pub steer_rate_std: f64,
    pub weights: RacingWeights,
    pub info: InfoObjective,
    /// Steering-rate amplitude and period of the weave warm starts.
    pub weave_amp: f64,
    pub weave_period: f64,
    pub pursuit: PursuitConfig,
    pub tracker: CarTracker,
    /// Vehicle parameters the pursuit uses for wheelbase and resistance;
    /// set from the simulated car, not read from configuration.
    #[serde(skip)]
    pub car: CarParams,
}

impl Default for RacingPlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 6.0,
            knot: 0.5,
            grip_frac: 0.8,
            v_max: 10.0,
            accel: 3.5,
            brake: 5.0,
            sampler: SamplerConfig {
                kind: SamplerKind::Mppi,
                samples: 16,
                iterations: 2,
                ..Default::default()
            },
            force_std: 3.0,
            steer_rate_std: 0.4,
            weights: RacingWeights::default(),
            info: InfoObjective::default(),
            weave_amp: 1.5,
            weave_period: 1.0,
            pursuit: PursuitConfig::default(),
            tracker: CarTracker::default(),
            car: CarParams::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RacingPlan {
    /// Closed-loop policy that produced `traj` on the planning model.
    pub policy: Arc<OffsetPursuit>,
    pub traj: Arc<Trajectory>,
    pub cost: f64,
    /// Largest corridor violation of the plan itself (> 0 means it leaves).
    pub violation: f64,
    pub logdet: f64,
}

/// Reference-tracker policy with per-knot force and steering-rate offsets.
#[derive(Clone, Debug)]
pub struct OffsetPursuit {
    pub base: PurePursuit,
    pub t0: f64,
    pub knot: f64,
    /// `(force, steering rate)` per knot.
    pub offsets: Vec<f64>,
}

impl Policy for OffsetPursuit {
    fn control(&self, t: f64, x: &[f64], u: &mut [f64]) {
        self.base.command(x, u);
        let k = (((t - self.t0).max(0.0) / self.knot + 1e-9).floor() as usize).min(self.offsets.len() / 2 - 1);
        let f = u[DRIVE] + u[BRAKE] + self.offsets[2 * k];
        split_force(f, u);
        u[STEER_RATE] += self.offsets[2 * k + 1];
        // Offsets may not push the steering past the pursuit limit.
        let lim = self.base.cfg.steer_limit;
        if (x[STEER] >= lim && u[STEER_RATE] > 0.0) || (x[STEER] <= -lim && u[STEER_RATE] < 0.0) {
            u[STEER_RATE] = 0.0;
        }
        self.base.bounds.clip(u);
    }
}

pub struct RacingPlanner {
    pub model: ModelSpec,
    pub track: Arc<Track>,
    pub cfg: RacingPlannerConfig,
}

impl RacingPlanner {
    pub fn new(model: ModelSpec, track: Arc<Track>, cfg: RacingPlannerConfig) -> Result<Self> {
        if model.n() != 7 || model.m() != 3 || model.p() != 1 {
            return Err(Error::Config("racing planner needs the 7-state car model".into()));
        }
        if !(cfg.horizon > 0.0 && cfg.knot > 0.0 && cfg.v_max > 0.0) {
            return Err(Error::Config("racing horizon, knot and v_max must be positive".into()));
        }
        Ok(Self { model, track, cfg })
    }

    pub fn car_params(&self) -> CarParams {
        self.cfg.car.clone()
    }

    /// Pursuit at a constant speed, the fallback policy.
    pub fn fallback(&self, params: &CarParams, speed: f64) -> PurePursuit {
        PurePursuit {
            track: self.track.clone(),
            params: params.clone(),
            cfg: self.cfg.pursuit.clone(),
            speed: Arc::new(SpeedProfile::constant(&self.track, speed)),
            bounds: self.model.input_bounds.clone(),
        }
    }

    /// Pursuit along a speed profile using `grip_frac` of the grip implied by `mu`.
    pub fn reference(&self, params: &CarParams, mu: f64) -> PurePursuit {
        let profile = SpeedProfile::new(
            &self.track,
            self.cfg.grip_frac * mu * G,
            self.cfg.v_max,
            self.cfg.accel,
            self.cfg.brake,
        );
        PurePursuit {
            track: self.track.clone(),
            params: params.clone(),
            cfg: self.cfg.pursuit.clone(),
            speed: Arc::new(profile),
            bounds: self.model.input_bounds.clone(),
        }
    }

    /// Progress deficit `int (1 - s_dot / v_max) dt` of a trajectory.
    pub fn progress_cost(&self, traj: &Trajectory) -> f64 {
        let mut cost = 0.0;
        let mut s_prev = self.track.frame_of(traj.states[0].as_slice()).s;
        for k in 0..traj.inputs.len() {
            let s = self.track.frame_of(traj.states[k + 1].as_slice()).s;
            let dt = traj.times[k + 1] - traj.times[k];
            cost += dt - self.track.progress_delta(s_prev, s) / self.cfg.v_max;
            s_prev = s;
        }
        cost
    }

    /// Stage-cost sum plus optional information reward for one rollout.
    fn rollout_cost(
        &self,
        policy: &dyn Policy,
        reference: &PurePursuit,
        mu: f64,
        x_k: &[f64],
        t_k: f64,
        steps: usize,
        info: Option<(&InfoObjective, &DMatrix<f64>)>,
    ) -> (f64, f64) {
        let w = &self.cfg.weights;
        let dt = self.model.dt;
        let mut model = self.model.clone();
        model.disturbance_bound = 0.0;
        let hw = self.track.half_width();
        let mut cost = 0.0;
        let mut worst = f64::NEG_INFINITY;
        let mut s_prev = self.track.frame_of(x_k).s;
        let mut u_prev = [0.0; 3];
        let mut prev = [0.0; 7];
        prev.copy_from_slice(x_k);
        let mut gram = GramAccumulator::new(1);
        let end = Simulator::new(&model, &[mu]).run(policy, x_k, t_k, steps, &mut seeding::rng(0), |k, _, x, u| {
            let f = self.track.frame_of(x);
            let ds = self.track.progress_delta(s_prev, f.s);
            s_prev = f.s;
            let edge = (f.e_y.abs() - w.edge_frac * hw).max(0.0);
            worst = worst.max(f.e_y.abs() - hw);
            let force = u[DRIVE] + u[BRAKE];
            let mut l = w.progress * (dt - ds / self.cfg.v_max)
                + dt * (w.heading * f.e_psi * f.e_psi
                    + w.speed * (x[VX] - reference.speed.at(f.s)).powi(2)
                    + w.lateral_velocity * x[VY] * x[VY]
                    + w.yaw_rate * x[OMEGA] * x[OMEGA]
                    + w.force * force * force
                    + w.steer_rate * u[STEER_RATE] * u[STEER_RATE]
                    + w.edge * edge * edge);
            if k > 0 {
                l += dt * w.input_change * ((force - u_prev[0]).powi(2) + (u[STEER_RATE] - u_prev[2]).powi(2));
            }
            u_prev = [force, 0.0, u[STEER_RATE]];
            if info.is_some() {
                gram.step(&model, &prev, u, x, dt);
            }
            prev.copy_from_slice(x);
            cost += l;
            ControlFlow::Continue(())
        });
        if end.is_err() {
            return (f64::INFINITY, f64::INFINITY);
        }
        if let Some((obj, factor)) = info {
            cost -= obj.gamma * obj.logdet(&gram.gram(), factor);
        }
        (cost, worst)
    }

    fn plan(
        &self,
        x_k: &[f64],
        t_k: f64,
        mu: f64,
        warm: Option<&[f64]>,
        info: bool,
        seed: u64,
    ) -> Result<(RacingPlan, Vec<f64>)> {
        let steps = steps_for(self.cfg.horizon, self.model.dt);
        let knots = ((self.cfg.horizon / self.cfg.knot) - 1e-9).ceil().max(1.0) as usize;
        let params = self.car_params();
        let reference = self.reference(&params, mu);
        let ub = &self.model.input_bounds;
        let f_span = ub.hi[DRIVE] - ub.lo[BRAKE];
        let mut std = Vec::with_capacity(2 * knots);
        let mut lo = Vec::with_capacity(2 * knots);
        let mut hi = Vec::with_capacity(2 * knots);
        for _ in 0..knots {
            std.extend([self.cfg.force_std, self.cfg.steer_rate_std]);
            lo.extend([-f_span, ub.lo[STEER_RATE]]);
            hi.extend([f_span, ub.hi[STEER_RATE]]);
        }
        let mean = warm.map(|w| w.to_vec()).unwrap_or_else(|| vec![0.0; 2 * knots]);
        let mut search = Search::new(mean, std, lo, hi);
        if warm.is_some() {
            search = search.with_seed(vec![0.0; 2 * knots]);
        }
        if info {
            for (amp, period) in [
                (self.cfg.weave_amp, self.cfg.weave_period),
                (-self.cfg.weave_amp, self.cfg.weave_period),
                (self.cfg.weave_amp, 2.0 * self.cfg.weave_period),
            ] {
                let weave: Vec<f64> = (0..knots)
                    .flat_map(|k| {
                        let t = (k as f64 + 0.5) * self.cfg.knot;
                        [0.0, amp * (std::f64::consts::TAU * t / period).cos()]
                    })
                    .collect();
                search = search.with_seed(weave);
            }
        }
        let obj = &self.cfg.info;
        let factor = obj.weight_factor(1)?;
        let info_term = info.then_some((obj, &factor));
        let knot = self.cfg.knot;
        let bind = |base: &PurePursuit, t0: f64, knot: f64, offsets: &[f64]| OffsetPursuit {
            base: base.clone(),
            t0,
            knot,
            offsets: offsets.to_vec(),
        };
        let result = minimize(search, &self.cfg.sampler, seed, |z| {
            self.rollout_cost(&bind(&reference, t_k, knot, z), &reference, mu, x_k, t_k, steps, info_term).0
        });
        let z = result.best;
        let mut model = self.model.clone();
        model.disturbance_bound = 0.0;
        let tag = if info { TrajTag::Informative } else { TrajTag::Nominal };
        let policy = Arc::new(bind(&reference, t_k, knot, &z));
        let traj = Simulator::new(&model, &[mu]).record(policy.as_ref(), x_k, t_k, steps, &mut seeding::rng(0), tag)?;
        let (cost, violation) = self.rollout_cost(policy.as_ref(), &reference, mu, x_k, t_k, steps, None);
        let logdet = obj.logdet(&super::information_gram(&self.model, &traj), &factor);
        Ok((
            RacingPlan {
                policy,
                traj: Arc::new(traj),
                cost,
                violation,
                logdet,
            },
            z,
        ))
    }

    /// Lap-time oriented plan on the estimate `mu`, without any margin.
    pub fn plan_nominal(&self, x_k: &[f64], t_k: f64, mu: f64, warm: Option<&[f64]>, seed: u64) -> Result<(RacingPlan, Vec<f64>)> {
        self.plan(x_k, t_k, mu, warm, false, seed)
    }

    /// Nominal objective minus the log-det reward, warm-started from weaves.
    pub fn plan_informative(&self, x_k: &[f64], t_k: f64, mu: f64, warm: Option<&[f64]>, seed: u64) -> Result<(RacingPlan, Vec<f64>)> {
        self.plan(x_k, t_k, mu, warm, true, seed)
    }
}
