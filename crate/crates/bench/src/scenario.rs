//! Scenario files: one JSON document per experiment, with every module
//! configuration materialized from defaults.

use std::path::Path;
use std::sync::Arc;

use dgk::constraints::StateSet;
use dgk::engine::quad::QuadMission;
use dgk::engine::race::{FallbackConfig, RaceMission};
use dgk::engine::{EngineConfig, LearningConfig, Method};
use dgk::models::{Bounds, ControlAffine, DragQuad, ModelSpec, VectorDragQuad};
use dgk::planners::car::RacingPlannerConfig;
use dgk::planners::quad::{QuadPlannerConfig, QuadTask};
use dgk::racing::{Car, CarParams, Track};
use dgk::smid::ParameterBox;
use dgk::verify::VerifySettings;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::{BenchError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    DragQuad,
    VectorDragQuad,
    Racing,
}

impl ModelKind {
    pub fn is_quad(self) -> bool {
        self != ModelKind::Racing
    }

    pub fn state_names(self) -> &'static [&'static str] {
        match self {
            ModelKind::Racing => &["px", "py", "psi", "vx", "vy", "omega", "steer"],
            _ => &["px", "py", "pz", "vx", "vy", "vz"],
        }
    }

    pub fn input_names(self) -> &'static [&'static str] {
        match self {
            ModelKind::Racing => &["drive", "brake", "steer_rate"],
            _ => &["ax", "ay", "az"],
        }
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            ModelKind::DragQuad => &["c_d"],
            ModelKind::VectorDragQuad => &["c_d1", "c_d2"],
            ModelKind::Racing => &["mu"],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// Exploration allowance, absolute or relative to the baseline method's cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Absolute(f64),
    PctOfBaseline(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadSetup {
    pub x0: Vec<f64>,
    pub task: QuadTask,
    #[serde(default)]
    pub planner: QuadPlannerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackSpec {
    /// Closed centerline; the built-in benchmark track when absent.
    #[serde(default)]
    pub waypoints: Option<Vec<[f64; 2]>>,
    pub half_width: f64,
    pub spacing: f64,
}

impl Default for TrackSpec {
    fn default() -> Self {
        Self {
            waypoints: None,
            half_width: 1.5,
            spacing: 0.1,
        }
    }
}

impl TrackSpec {
    pub fn build(&self) -> Result<Track> {
        let pts = match &self.waypoints {
            Some(w) => w.clone(),
            None => Track::kidney_waypoints(72),
        };
        Ok(Track::from_waypoints(&pts, self.half_width, self.spacing)?)
    }
}

fn default_laps() -> usize {
    10
}
fn default_time_limit() -> f64 {
    300.0
}
fn default_backup_horizon() -> f64 {
    6.0
}
fn default_steer_max() -> f64 {
    0.5
}
fn default_start_speed() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RacingSetup {
    #[serde(default)]
    pub track: TrackSpec,
    #[serde(default)]
    pub car: CarParams,
    #[serde(default)]
    pub start_s: f64,
    #[serde(default = "default_start_speed")]
    pub start_speed: f64,
    /// Friction the planners assume before learning.
    #[serde(default)]
    pub theta_planned: Option<f64>,
    /// Per-trial friction guesses for sweeps; trial `i` uses entry `i mod len`.
    #[serde(default)]
    pub theta_planned_grid: Vec<f64>,
    #[serde(default = "default_laps")]
    pub laps: usize,
    #[serde(default = "default_time_limit")]
    pub time_limit: f64,
    #[serde(default)]
    pub planner: RacingPlannerConfig,
    #[serde(default)]
    pub verify: VerifySettings,
    #[serde(default)]
    pub fallback: FallbackConfig,
    #[serde(default = "default_backup_horizon")]
    pub backup_horizon: f64,
    #[serde(default = "default_steer_max")]
    pub steer_max: f64,
}

fn default_dt() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub model: ModelKind,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub disturbance_bound: f64,
    pub true_theta: Vec<f64>,
    pub initial_box: BoxSpec,
    pub input_bounds: BoxSpec,
    pub budget: Budget,
    /// Method used by `run` when none is given on the command line.
    #[serde(default)]
    pub method: Option<Method>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub learning: LearningConfig,
    #[serde(default)]
    pub quad: Option<QuadSetup>,
    #[serde(default)]
    pub racing: Option<RacingSetup>,
}

/// Command-line adjustments applied on top of a scenario file.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Overrides {
    pub budget_pct: Option<f64>,
    /// Verification rollouts (racing) or tube rollouts (quadrotor).
    pub rollouts: Option<usize>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let sc: Scenario = serde_path_to_error::deserialize(de).map_err(|e| BenchError::Parse {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<()> {
        let names = self.model.param_names();
        let invalid = |m: String| Err(BenchError::Invalid(m));
        if self.true_theta.len() != names.len() {
            return invalid(format!("true_theta needs {} entries", names.len()));
        }
        let bx = self.initial_box()?;
        if !bx.contains(&DVector::from_column_slice(&self.true_theta)) {
            return invalid("true_theta must lie in initial_box".into());
        }
        if !(self.dt > 0.0) || !(self.disturbance_bound >= 0.0) {
            return invalid("dt must be positive and disturbance_bound non-negative".into());
        }
        match self.budget {
            Budget::Absolute(b) | Budget::PctOfBaseline(b) if !(b >= 0.0 && b.is_finite()) => {
                return invalid("budget must be finite and non-negative".into())
            }
            _ => {}
        }
        if self.model.is_quad() {
            let q = self.quad.as_ref().ok_or_else(|| BenchError::Invalid("quadrotor scenarios need a 'quad' section".into()))?;
            if q.x0.len() != 6 {
                return invalid("quad.x0 needs 6 entries".into());
            }
            if !q.task.arena.contains(&q.x0) {
                return invalid("quad.x0 must lie in the arena".into());
            }
        } else {
            let r = self.racing.as_ref().ok_or_else(|| BenchError::Invalid("racing scenarios need a 'racing' section".into()))?;
            r.car.validate()?;
            for &mu in r.theta_planned.iter().chain(&r.theta_planned_grid) {
                if !(mu > 0.0) {
                    return invalid("planned friction must be positive".into());
                }
            }
        }
        if let Some(m) = self.method {
            self.check_method(m)?;
        }
        Ok(())
    }

    pub fn check_method(&self, method: Method) -> Result<()> {
        let ok = if self.model.is_quad() {
            matches!(method, Method::Baseline | Method::DualGatekeeper)
        } else {
            method != Method::Baseline
        };
        if ok {
            Ok(())
        } else {
            Err(BenchError::Invalid(format!(
                "method '{}' is not available for model {:?}",
                method.name(),
                self.model
            )))
        }
    }

    /// Method whose cost normalizes percentages: the robust backup for the
    /// quadrotor, the fallback for racing.
    pub fn baseline_method(&self) -> Method {
        if self.model.is_quad() {
            Method::Baseline
        } else {
            Method::Fallback
        }
    }

    pub fn initial_box(&self) -> Result<ParameterBox> {
        Ok(ParameterBox::from_slices(&self.initial_box.lo, &self.initial_box.hi)?)
    }

    pub fn with_overrides(&self, o: Overrides) -> Self {
        let mut sc = self.clone();
        if let Some(p) = o.budget_pct {
            sc.budget = Budget::PctOfBaseline(p);
        }
        if let Some(n) = o.rollouts {
            if let Some(q) = sc.quad.as_mut() {
                q.planner.tube.n_tube = n;
                q.planner.tube.n_holdout = n;
            }
            if let Some(r) = sc.racing.as_mut() {
                r.verify.n_rollouts = n;
                r.verify.chunk = r.verify.chunk.min(n);
            }
        }
        sc
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let dynamics: Arc<dyn ControlAffine> = match self.model {
            ModelKind::DragQuad => Arc::new(DragQuad::default()),
            ModelKind::VectorDragQuad => Arc::new(VectorDragQuad::default()),
            ModelKind::Racing => Arc::new(Car::new(self.racing.as_ref().map(|r| r.car.clone()).unwrap_or_default())),
        };
        let n = dynamics.state_dim();
        Ok(ModelSpec::new(
            dynamics,
            DVector::from_column_slice(&self.true_theta),
            self.disturbance_bound,
            Bounds::unbounded(n),
            Bounds::new(self.input_bounds.lo.clone(), self.input_bounds.hi.clone())?,
            self.dt,
        )?)
    }

    pub fn quad_mission(&self, budget: f64) -> Result<QuadMission> {
        let q = self.quad.as_ref().ok_or_else(|| BenchError::Invalid("missing 'quad' section".into()))?;
        Ok(QuadMission {
            model: self.model_spec()?,
            task: q.task.clone(),
            x0: q.x0.clone(),
            initial_box: self.initial_box()?,
            planner: q.planner.clone(),
            engine: self.engine.clone(),
            learning: self.learning.clone(),
            budget,
        })
    }

    /// Friction guess of sweep trial `trial`, or the scenario's own guess.
    pub fn theta_planned(&self, trial: Option<usize>) -> Option<f64> {
        let r = self.racing.as_ref()?;
        match trial {
            Some(i) if !r.theta_planned_grid.is_empty() => Some(r.theta_planned_grid[i % r.theta_planned_grid.len()]),
            _ => r.theta_planned,
        }
    }

    pub fn race_mission(&self, budget: f64, theta_planned: Option<f64>) -> Result<RaceMission> {
        let r = self.racing.as_ref().ok_or_else(|| BenchError::Invalid("missing 'racing' section".into()))?;
        let mut planner = r.planner.clone();
        planner.car = r.car.clone();
        planner.tracker.mass = r.car.m;
        Ok(RaceMission {
            model: self.model_spec()?,
            track: Arc::new(r.track.build()?),
            start_s: r.start_s,
            start_speed: r.start_speed,
            initial_box: self.initial_box()?,
            theta_planned,
            laps: r.laps,
            time_limit: r.time_limit,
            planner,
            engine: self.engine.clone(),
            verify: r.verify.clone(),
            fallback: r.fallback.clone(),
            backup_horizon: r.backup_horizon,
            steer_max: r.steer_max,
            learning: self.learning.clone(),
            budget,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const QUAD: &str = r#"{
        "name": "tiny",
        "model": "drag_quad",
        "disturbance_bound": 0.05,
        "true_theta": [0.2],
        "initial_box": {"lo": [0.0], "hi": [0.5]},
        "input_bounds": {"lo": [-20, -20, -20], "hi": [20, 20, 20]},
        "budget": {"pct_of_baseline": 110},
        "quad": {
            "x0": [0, 0, 0, 0, 0, 0],
            "task": {
                "arena": {"pos_lo": [-1, -3, -2], "pos_hi": [11, 3, 2], "obstacles": [], "speed_max": 4},
                "goal": {"center": [10, 0, 0], "radius": 1, "speed": 1.5},
                "guide": [[0, 0, 0], [10, 0, 0]],
                "t_final": 6
            }
        }
    }"#;

    #[test]
    fn parses_with_defaults() {
        let sc = Scenario::parse(QUAD).unwrap();
        assert_eq!(sc.dt, 0.02);
        assert_eq!(sc.engine, EngineConfig::default());
        assert_eq!(sc.budget, Budget::PctOfBaseline(110.0));
        assert_eq!(sc.baseline_method(), Method::Baseline);
        assert!(sc.check_method(Method::Nominal).is_err());
    }

    #[test]
    fn reports_the_field_path_of_bad_input() {
        let bad = QUAD.replace("\"radius\": 1", "\"radius\": \"one\"");
        match Scenario::parse(&bad) {
            Err(BenchError::Parse { path, .. }) => assert_eq!(path, "quad.task.goal.radius"),
            other => panic!("expected a parse error, got {other:?}"),
        }
        let unknown = QUAD.replace("\"dt\"", "\"dtt\"").replace("\"name\"", "\"nmae\"");
        assert!(matches!(Scenario::parse(&unknown), Err(BenchError::Parse { .. })));
    }

    #[test]
    fn true_theta_outside_box_is_rejected() {
        let bad = QUAD.replace("\"true_theta\": [0.2]", "\"true_theta\": [0.7]");
        assert!(matches!(Scenario::parse(&bad), Err(BenchError::Invalid(_))));
    }

    #[test]
    fn overrides_apply() {
        let sc = Scenario::parse(QUAD).unwrap().with_overrides(Overrides {
            budget_pct: Some(50.0),
            rollouts: Some(12),
        });
        assert_eq!(sc.budget, Budget::PctOfBaseline(50.0));
        assert_eq!(sc.quad.unwrap().planner.tube.n_tube, 12);
    }

    #[test]
    fn racing_grid_cycles_over_trials() {
        let sc = Scenario {
            model: ModelKind::Racing,
            true_theta: vec![0.9],
            initial_box: BoxSpec { lo: vec![0.2], hi: vec![2.0] },
            input_bounds: BoxSpec {
                lo: vec![0.0, -25.0, -3.0],
                hi: vec![15.0, 0.0, 3.0],
            },
            quad: None,
            racing: Some(RacingSetup {
                theta_planned: Some(1.0),
                theta_planned_grid: vec![0.3, 0.6],
                ..serde_json::from_str("{}").unwrap()
            }),
            ..Scenario::parse(QUAD).unwrap()
        };
        sc.validate().unwrap();
        assert_eq!(sc.theta_planned(Some(3)), Some(0.6));
        assert_eq!(sc.theta_planned(None), Some(1.0));
        assert_eq!(sc.baseline_method(), Method::Fallback);
        assert!(sc.check_method(Method::Baseline).is_err());
    }
}
