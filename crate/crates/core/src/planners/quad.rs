//! Drag-quadrotor planners for the tube instantiation: robust backup plans
//! with a sampled tube and informative segments that rejoin the backup.

use std::ops::ControlFlow;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::tracking::{estimate_tube, holdout_coverage, PdGains, TrackingLaw, Tube, TubeConfig};
use super::{GramAccumulator, InfoObjective};
use crate::constraints::{GoalRegion, QuadArena, StateSet};
use crate::error::{Error, Result};
use crate::models::{steps_for, ModelSpec, Policy, Simulator, TrajTag, Trajectory, MAX_STATE};
use crate::sampling::{minimize, SamplerConfig, Search};
use crate::seeding::{self, derive_seed};
use crate::smid::ParameterBox;

/// Mission geometry: arena, goal and a guide polyline ending at the goal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadTask {
    pub arena: QuadArena,
    pub goal: GoalRegion,
    pub guide: Vec<[f64; 3]>,
    pub t_final: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadPlannerConfig {
    /// Knot spacing of the piecewise-constant offsets (s).
    pub knot: f64,
    pub gains: PdGains,
    /// Gains of the guide tracker that shapes backup nominals.
    pub guide_gains: PdGains,
    pub effort_weight: f64,
    pub goal_weight: f64,
    pub violation_weight: f64,
    pub tube: TubeConfig,
    pub passes: usize,
    pub sampler: SamplerConfig,
    pub speed_range: [f64; 2],
    pub offset_max: f64,
    pub offset_std: f64,
    pub info: InfoObjective,
    pub info_sampler: SamplerConfig,
    /// Knot spacing of informative offsets (s).
    pub info_knot: f64,
    pub info_offset_max: f64,
    pub info_offset_std: f64,
    pub terminal_weight: f64,
    /// Recoverability tolerance on the terminal state (infinity norm).
    pub terminal_tol: f64,
    pub correction_knots: usize,
    pub correction_iters: usize,
}

impl Default for QuadPlannerConfig {
    fn default() -> Self {
        Self {
            knot: 1.0,
            gains: PdGains::default(),
            guide_gains: PdGains { kp: 2.0, kd: 3.0 },
            effort_weight: 0.1,
            goal_weight: 1.0,
            violation_weight: 1e4,
            tube: TubeConfig::default(),
            passes: 3,
            sampler: SamplerConfig {
                samples: 32,
                iterations: 5,
                ..Default::default()
            },
            speed_range: [0.3, 4.0],
            offset_max: 3.0,
            offset_std: 0.5,
            info: InfoObjective::default(),
            info_sampler: SamplerConfig {
                samples: 32,
                iterations: 4,
                ..Default::default()
            },
            info_knot: 0.25,
            info_offset_max: 6.0,
            info_offset_std: 2.0,
            terminal_weight: 200.0,
            terminal_tol: 0.05,
            correction_knots: 2,
            correction_iters: 6,
        }
    }
}

/// Arc-length parameterized polyline.
#[derive(Clone, Debug)]
pub struct Polyline {
    pts: Vec<[f64; 3]>,
    cum: Vec<f64>,
}

impl Polyline {
    pub fn new(pts: Vec<[f64; 3]>) -> Result<Self> {
        if pts.len() < 2 {
            return Err(Error::Config("guide needs at least two points".into()));
        }
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            let d = dist(&w[0], &w[1]);
            if d <= 0.0 {
                return Err(Error::Config("guide points must be distinct".into()));
            }
            cum.push(cum.last().unwrap() + d);
        }
        Ok(Self { pts, cum })
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Arc length of the closest point.
    pub fn project(&self, p: &[f64]) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..self.pts.len() - 1 {
            let (a, b) = (&self.pts[i], &self.pts[i + 1]);
            let len = self.cum[i + 1] - self.cum[i];
            let t = ((0..3).map(|k| (p[k] - a[k]) * (b[k] - a[k])).sum::<f64>() / (len * len)).clamp(0.0, 1.0);
            let q = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])];
            let d = dist(&q, &[p[0], p[1], p[2]]);
            if d < best.0 {
                best = (d, self.cum[i] + t * len);
            }
        }
        best.1
    }

    /// Point and unit tangent at arc length `s`, clamped to the ends.
    pub fn at(&self, s: f64) -> ([f64; 3], [f64; 3]) {
        let s = s.clamp(0.0, self.length());
        let i = (self.cum.partition_point(|&c| c <= s).max(1) - 1).min(self.pts.len() - 2);
        let (a, b) = (&self.pts[i], &self.pts[i + 1]);
        let len = self.cum[i + 1] - self.cum[i];
        let t = (s - self.cum[i]) / len;
        (
            [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])],
            [(b[0] - a[0]) / len, (b[1] - a[1]) / len, (b[2] - a[2]) / len],
        )
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Acceleration input that realizes `a_des` under the estimate `theta`.
fn invert_acceleration(model: &ModelSpec, theta: &[f64], x: &[f64], a_des: &[f64; 3], u: &mut [f64]) {
    let (n, p) = (model.n(), model.p());
    let mut drift = [0.0; MAX_STATE];
    model.dynamics.drift(x, &mut drift[..n]);
    let mut phi = [0.0; MAX_STATE * crate::models::MAX_PARAM];
    model.dynamics.regressor(x, &[0.0; 3], &mut phi[..n * p]);
    for i in 0..3 {
        let row = 3 + i;
        let unc: f64 = (0..p).map(|c| phi[row * p + c] * theta[c]).sum();
        u[i] = a_des[i] - drift[row] - unc;
    }
}

/// Reference point moving along the guide at constant speed, tracked with
/// drag compensation, plus per-knot acceleration offsets.
struct GuidedPolicy<'a> {
    model: &'a ModelSpec,
    guide: &'a Polyline,
    theta: &'a [f64],
    gains: PdGains,
    s0: f64,
    t0: f64,
    speed: f64,
    knot: f64,
    offsets: &'a [f64],
}

impl Policy for GuidedPolicy<'_> {
    fn control(&self, t: f64, x: &[f64], u: &mut [f64]) {
        let tau = (t - self.t0).max(0.0);
        let s = self.s0 + self.speed * tau;
        let (p, tan) = self.guide.at(s);
        let v_ref = if s < self.guide.length() { self.speed } else { 0.0 };
        let k = ((tau / self.knot + 1e-9).floor() as usize).min(self.offsets.len() / 3 - 1);
        let mut a = [0.0; 3];
        for i in 0..3 {
            a[i] = self.gains.kp * (p[i] - x[i]) + self.gains.kd * (v_ref * tan[i] - x[3 + i]) + self.offsets[3 * k + i];
        }
        invert_acceleration(self.model, self.theta, x, &a, u);
    }
}

/// Open-loop replay of a base trajectory's inputs plus per-knot offsets.
struct OffsetReplay<'a> {
    base: &'a Trajectory,
    t0: f64,
    knot: f64,
    offsets: &'a [f64],
}

impl Policy for OffsetReplay<'_> {
    fn control(&self, t: f64, _x: &[f64], u: &mut [f64]) {
        let j = self.base.interval_at(t);
        let k = (((t - self.t0).max(0.0) / self.knot + 1e-9).floor() as usize).min(self.offsets.len() / 3 - 1);
        for i in 0..3 {
            u[i] = self.base.inputs[j][i] + self.offsets[3 * k + i];
        }
    }
}

/// Robust backup: nominal plus sampled tube.
#[derive(Clone, Debug)]
pub struct BackupPlan {
    pub nominal: Arc<Trajectory>,
    pub tube: Tube,
    pub gains: PdGains,
    pub certified: bool,
    pub coverage: f64,
    pub horizon: f64,
    pub passes: usize,
}

/// Informative segment ending near the backup nominal.
#[derive(Clone, Debug)]
pub struct InformativePlan {
    pub traj: Arc<Trajectory>,
    pub terminal_error: f64,
    pub recoverable: bool,
    pub logdet: f64,
}

pub struct QuadPlanner {
    pub model: ModelSpec,
    pub task: QuadTask,
    pub cfg: QuadPlannerConfig,
    guide: Polyline,
}

impl QuadPlanner {
    pub fn new(model: ModelSpec, task: QuadTask, cfg: QuadPlannerConfig) -> Result<Self> {
        if model.n() != 6 || model.m() != 3 {
            return Err(Error::Config("quadrotor planner needs a 6-state, 3-input model".into()));
        }
        if !(cfg.knot > 0.0) || cfg.passes == 0 {
            return Err(Error::Config("knot must be positive and passes at least 1".into()));
        }
        let guide = Polyline::new(task.guide.clone())?;
        Ok(Self {
            model,
            task,
            cfg,
            guide,
        })
    }

    pub fn law(&self) -> Arc<dyn TrackingLaw> {
        Arc::new(self.cfg.gains)
    }

    /// Stage cost `alpha |u - u_hover|^2 + beta |r - r_goal|^2`.
    pub fn stage_cost(&self, x: &[f64], u: &[f64]) -> f64 {
        let mut drift = [0.0; MAX_STATE];
        self.model.dynamics.drift(x, &mut drift[..6]);
        let mut effort = 0.0;
        let mut miss = 0.0;
        for i in 0..3 {
            effort += (u[i] + drift[3 + i]).powi(2);
            miss += (x[i] - self.task.goal.center[i]).powi(2);
        }
        self.cfg.effort_weight * effort + self.cfg.goal_weight * miss
    }

    /// Cost accumulated along a trajectory's nominal samples only.
    pub fn path_cost(&self, traj: &Trajectory) -> f64 {
        (0..traj.inputs.len())
            .map(|k| {
                self.stage_cost(traj.states[k].as_slice(), traj.inputs[k].as_slice())
                    * (traj.times[k + 1] - traj.times[k])
            })
            .sum()
    }

    /// Rollout cost with constraints tightened by `tube` and an optional
    /// terminal target; the trajectory itself is not kept.
    #[allow(clippy::too_many_arguments)]
    fn rollout_cost(
        &self,
        policy: &dyn Policy,
        theta: &[f64],
        x_k: &[f64],
        t_k: f64,
        steps: usize,
        tube: &Tube,
        terminal: Terminal<'_>,
        info: Option<(&InfoObjective, &DMatrix<f64>)>,
    ) -> f64 {
        let dt = self.model.dt;
        let mut rng = seeding::rng(0);
        let mut model = self.model.clone();
        model.disturbance_bound = 0.0;
        let mut cost = 0.0;
        let mut viol = 0.0;
        let mut prev = [0.0; 6];
        prev.copy_from_slice(x_k);
        let mut gram = GramAccumulator::new(model.p());
        let mut last = [0.0; 6];
        let end = Simulator::new(&model, theta).run(policy, x_k, t_k, steps, &mut rng, |k, _, x, u| {
            cost += self.stage_cost(&prev, u) * dt;
            let v = self
                .task
                .arena
                .violation(x, tube.radii[k + 1].as_slice())
                .max(model.input_bounds.violation(u, tube.input_radii[k].as_slice()));
            if v > 0.0 {
                viol += v * dt;
            }
            if info.is_some() {
                gram.step(&model, &prev, u, x, dt);
            }
            prev.copy_from_slice(x);
            last.copy_from_slice(x);
            ControlFlow::Continue(())
        });
        if end.is_err() {
            return f64::INFINITY;
        }
        let mut total = cost + self.cfg.violation_weight * viol;
        match terminal {
            Terminal::Goal(r) => {
                let v = self.task.goal.violation(&last, r.as_slice());
                if v > 0.0 {
                    total += self.cfg.violation_weight * (v + v * v);
                }
            }
            Terminal::State(target) => {
                let e: f64 = (0..6).map(|i| (last[i] - target[i]).powi(2)).sum();
                total += self.cfg.terminal_weight * e;
            }
        }
        if let Some((obj, factor)) = info {
            total -= obj.gamma * obj.logdet(&gram.gram(), factor);
        }
        total
    }

    fn guided<'a>(&'a self, theta: &'a [f64], x_k: &[f64], t_k: f64, z: &'a [f64]) -> GuidedPolicy<'a> {
        GuidedPolicy {
            model: &self.model,
            guide: &self.guide,
            theta,
            gains: self.cfg.guide_gains,
            s0: self.guide.project(x_k),
            t0: t_k,
            speed: z[0],
            knot: self.cfg.knot,
            offsets: &z[1..],
        }
    }

    fn record(&self, policy: &dyn Policy, theta: &[f64], x_k: &[f64], t_k: f64, steps: usize, tag: TrajTag) -> Result<Trajectory> {
        let mut model = self.model.clone();
        model.disturbance_bound = 0.0;
        Simulator::new(&model, theta).record(policy, x_k, t_k, steps, &mut seeding::rng(0), tag)
    }

    /// Backup plan over the remaining mission time `horizon`, planned on the
    /// box midpoint and tightened by the sampled tube until the nominal fits.
    pub fn plan_backup(
        &self,
        x_k: &[f64],
        t_k: f64,
        horizon: f64,
        bx: &ParameterBox,
        warm: Option<&[f64]>,
        seed: u64,
    ) -> Result<(BackupPlan, Vec<f64>)> {
        let steps = steps_for(horizon, self.model.dt);
        if steps == 0 {
            return Err(Error::PlanFailure("backup horizon shorter than one step".into()));
        }
        let theta = bx.midpoint();
        let theta = theta.as_slice();
        let knots = ((horizon / self.cfg.knot) - 1e-9).ceil().max(1.0) as usize;
        let dim = 1 + 3 * knots;
        let remaining = self.guide.length() - self.guide.project(x_k);
        let [v_lo, v_hi] = self.cfg.speed_range;
        let mut mean = vec![0.0; dim];
        mean[0] = (remaining / (0.7 * horizon)).clamp(v_lo, v_hi);
        if let Some(w) = warm {
            // Reuse the previous solution shifted to the new start time.
            mean[0] = w[0];
            let shift = w.len().saturating_sub(1) / 3 - knots.min(w.len().saturating_sub(1) / 3);
            for k in 0..knots {
                let src = k + shift;
                if 3 * src + 3 < w.len() {
                    mean[1 + 3 * k..4 + 3 * k].copy_from_slice(&w[1 + 3 * src..4 + 3 * src]);
                }
            }
        }
        let mut std = vec![self.cfg.offset_std; dim];
        std[0] = 0.25 * (v_hi - v_lo);
        let mut lo = vec![-self.cfg.offset_max; dim];
        let mut hi = vec![self.cfg.offset_max; dim];
        lo[0] = v_lo;
        hi[0] = v_hi;

        let law = self.law();
        let mut tube = Tube::zeros(&Trajectory::new(DVector::zeros(6), 0.0, TrajTag::Backup), 0.0);
        tube.radii = vec![DVector::from_element(6, self.cfg.tube.margin); steps + 1];
        tube.input_radii = vec![DVector::from_element(3, self.cfg.tube.margin); steps];
        let mut z = mean.clone();
        for pass in 0..self.cfg.passes {
            let mut search = Search::new(z.clone(), std.clone(), lo.clone(), hi.clone());
            if pass == 0 && warm.is_some() {
                let mut cold = vec![0.0; dim];
                cold[0] = (remaining / (0.7 * horizon)).clamp(v_lo, v_hi);
                search = search.with_seed(cold);
            }
            let tube_ref = &tube;
            let result = minimize(search, &self.cfg.sampler, derive_seed(seed, pass as u64), |z| {
                let pol = self.guided(theta, x_k, t_k, z);
                self.rollout_cost(&pol, theta, x_k, t_k, steps, tube_ref, Terminal::Goal(tube_ref.radii.last().unwrap()), None)
            });
            z = result.best;
            let nominal = Arc::new(self.record(&self.guided(theta, x_k, t_k, &z), theta, x_k, t_k, steps, TrajTag::Backup)?);
            let est = estimate_tube(&self.model, &nominal, &law, bx, &self.cfg.tube, derive_seed(seed, 100 + pass as u64))?;
            let fits = self.fits(&nominal, &est);
            if fits {
                let coverage = holdout_coverage(
                    &self.model,
                    &nominal,
                    &law,
                    bx,
                    &est,
                    self.cfg.tube.n_holdout,
                    derive_seed(seed, 200 + pass as u64),
                )?;
                return Ok((
                    BackupPlan {
                        nominal,
                        tube: est,
                        gains: self.cfg.gains,
                        certified: coverage >= 1.0,
                        coverage,
                        horizon,
                        passes: pass + 1,
                    },
                    z,
                ));
            }
            tube.max_with(&est);
        }
        Err(Error::PlanFailure(format!(
            "no backup satisfies the tightened constraints after {} passes",
            self.cfg.passes
        )))
    }

    /// Whether `nominal` satisfies the arena, input and goal constraints
    /// tightened by `tube`.
    pub fn fits(&self, nominal: &Trajectory, tube: &Tube) -> bool {
        tube.tightened_violation(nominal, &self.task.arena, &self.model.input_bounds) <= 0.0
            && self
                .task
                .goal
                .violation(nominal.final_state().as_slice(), tube.radii.last().unwrap().as_slice())
                <= 0.0
    }

    /// Whether the informative segment stays clear of the arena and input
    /// limits tightened by `tube`.
    pub fn segment_fits(&self, nominal: &Trajectory, tube: &Tube) -> bool {
        tube.tightened_violation(nominal, &self.task.arena, &self.model.input_bounds) <= 0.0
    }

    /// Segment of length `horizon` that trades cost against the log-det
    /// information reward and ends near the backup nominal at `t_k + horizon`.
    pub fn plan_informative(
        &self,
        backup: &BackupPlan,
        theta: &[f64],
        horizon: f64,
        seed: u64,
    ) -> Result<InformativePlan> {
        let base = backup.nominal.as_ref();
        let t_k = base.start_time();
        let x_k: Vec<f64> = base.states[0].iter().copied().collect();
        let steps = steps_for(horizon, self.model.dt).min(base.inputs.len());
        if steps == 0 {
            return Err(Error::PlanFailure("informative horizon shorter than one step".into()));
        }
        let target: Vec<f64> = base.states[steps].iter().copied().collect();
        let knot = self.cfg.info_knot;
        let knots = ((steps as f64 * self.model.dt / knot) - 1e-9).ceil().max(1.0) as usize;
        let dim = 3 * knots;
        let obj = &self.cfg.info;
        let factor = obj.weight_factor(self.model.p())?;
        let mut tube = backup.tube.clone();
        tube.radii.truncate(steps + 1);
        tube.input_radii.truncate(steps);
        let search = Search::new(
            vec![0.0; dim],
            vec![self.cfg.info_offset_std; dim],
            vec![-self.cfg.info_offset_max; dim],
            vec![self.cfg.info_offset_max; dim],
        );
        fn bind<'a>(base: &'a Trajectory, t0: f64, knot: f64, offsets: &'a [f64]) -> OffsetReplay<'a> {
            OffsetReplay { base, t0, knot, offsets }
        }
        let span = steps as f64 * self.model.dt;
        let result = minimize(search, &self.cfg.info_sampler, seed, |z| {
            let z = rejoin_projection(z, knot, span);
            self.rollout_cost(&bind(base, t_k, knot, &z), theta, &x_k, t_k, steps, &tube, Terminal::State(&target), Some((obj, &factor)))
        });
        let mut z = rejoin_projection(&result.best, knot, span);
        self.correct_terminal(&mut z, base, theta, &x_k, t_k, steps, &target)?;
        let traj = self.record(&bind(base, t_k, knot, &z), theta, &x_k, t_k, steps, TrajTag::Informative)?;
        let terminal_error = (traj.final_state() - DVector::from_column_slice(&target)).amax();
        let logdet = obj.logdet(&super::information_gram(&self.model, &traj), &factor);
        Ok(InformativePlan {
            traj: Arc::new(traj),
            terminal_error,
            recoverable: terminal_error <= self.cfg.terminal_tol,
            logdet,
        })
    }

    /// Gauss-Newton on the last knots to drive the terminal state onto `target`.
    #[allow(clippy::too_many_arguments)]
    fn correct_terminal(
        &self,
        z: &mut [f64],
        base: &Trajectory,
        theta: &[f64],
        x_k: &[f64],
        t_k: f64,
        steps: usize,
        target: &[f64],
    ) -> Result<()> {
        let knots = z.len() / 3;
        let tail = self.cfg.correction_knots.min(knots).max(1);
        let first = knots - tail;
        let vars = 3 * tail;
        let bound = self.cfg.info_offset_max;
        let terminal = |z: &[f64]| -> Result<DVector<f64>> {
            let pol = OffsetReplay {
                base,
                t0: t_k,
                knot: self.cfg.info_knot,
                offsets: z,
            };
            let traj = self.record(&pol, theta, x_k, t_k, steps, TrajTag::Informative)?;
            Ok(traj.final_state() - DVector::from_column_slice(target))
        };
        let mut err = terminal(z)?;
        for _ in 0..self.cfg.correction_iters {
            if err.amax() <= 0.2 * self.cfg.terminal_tol {
                break;
            }
            let h = 1e-4;
            let mut jac = DMatrix::zeros(6, vars);
            for c in 0..vars {
                let mut zp = z.to_vec();
                zp[3 * first + c] += h;
                let ep = terminal(&zp)?;
                jac.set_column(c, &((ep - &err) / h));
            }
            let svd = jac.svd(true, true);
            let step = match svd.solve(&(-&err), 1e-9) {
                Ok(s) => s,
                Err(_) => break,
            };
            let mut trial = z.to_vec();
            for c in 0..vars {
                trial[3 * first + c] = (trial[3 * first + c] + step[c]).clamp(-bound, bound);
            }
            let e_trial = terminal(&trial)?;
            if e_trial.norm() >= err.norm() {
                break;
            }
            z.copy_from_slice(&trial);
            err = e_trial;
        }
        Ok(())
    }
}

/// Projects per-axis acceleration offsets onto those that leave a double
/// integrator's terminal position and velocity unchanged over `span`.
fn rejoin_projection(z: &[f64], knot: f64, span: f64) -> Vec<f64> {
    let knots = z.len() / 3;
    let mut c = DMatrix::zeros(2, knots);
    for k in 0..knots {
        let start = k as f64 * knot;
        let len = (span - start).min(knot).max(0.0);
        c[(0, k)] = len;
        // Position effect of a unit pulse on [start, start + len] at `span`.
        c[(1, k)] = len * (span - start - 0.5 * len);
    }
    let pinv = match c.clone().pseudo_inverse(1e-12) {
        Ok(p) => p,
        Err(_) => return z.to_vec(),
    };
    let proj = DMatrix::identity(knots, knots) - pinv * c;
    let mut out = vec![0.0; z.len()];
    for axis in 0..3 {
        let a = DVector::from_iterator(knots, (0..knots).map(|k| z[3 * k + axis]));
        let b = &proj * a;
        for k in 0..knots {
            out[3 * k + axis] = b[k];
        }
    }
    out
}

#[derive(Clone, Copy)]
enum Terminal<'a> {
    Goal(&'a DVector<f64>),
    State(&'a [f64]),
}
