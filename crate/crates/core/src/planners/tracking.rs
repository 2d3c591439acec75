//! Tracking feedback around nominal trajectories, switched policies, and the
//! sampled tube that bounds closed-loop deviation.

use std::fmt;
use std::ops::ControlFlow;
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::StateSet;
use crate::error::Result;
use crate::models::{Bounds, ModelSpec, Policy, Simulator, Trajectory, MAX_INPUT};
use crate::seeding;
use crate::smid::ParameterBox;

/// Correction added to a nominal input given the current and nominal states.
pub trait TrackingLaw: Send + Sync + fmt::Debug {
    /// Writes `u_nom + correction` into `u`.
    fn command(&self, x: &[f64], x_nom: &[f64], u_nom: &[f64], u: &mut [f64]);
}

/// Position/velocity feedback for a double integrator with acceleration
/// input: `u = u_nom + kp (r_nom - r) + kd (v_nom - v)` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdGains {
    pub kp: f64,
    pub kd: f64,
}

impl Default for PdGains {
    fn default() -> Self {
        Self { kp: 4.0, kd: 4.0 }
    }
}

impl TrackingLaw for PdGains {
    fn command(&self, x: &[f64], x_nom: &[f64], u_nom: &[f64], u: &mut [f64]) {
        let axes = u.len();
        for i in 0..axes {
            u[i] = u_nom[i] + self.kp * (x_nom[i] - x[i]) + self.kd * (x_nom[axes + i] - x[axes + i]);
        }
    }
}

/// Ancillary controller: follows a nominal trajectory with a tracking law,
/// holding the last sample past its end.
#[derive(Clone, Debug)]
pub struct TrackingPolicy {
    pub nominal: Arc<Trajectory>,
    pub law: Arc<dyn TrackingLaw>,
    pub input_bounds: Bounds,
}

impl TrackingPolicy {
    pub fn new(nominal: Arc<Trajectory>, law: Arc<dyn TrackingLaw>, input_bounds: Bounds) -> Self {
        Self {
            nominal,
            law,
            input_bounds,
        }
    }

    /// Saturated tracking input at `(t, x)`.
    pub fn ancillary(&self, t: f64, x: &[f64], u: &mut [f64]) {
        let k = self.nominal.nearest_index(t);
        let j = k.min(self.nominal.inputs.len() - 1);
        self.law.command(
            x,
            self.nominal.states[k].as_slice(),
            self.nominal.inputs[j].as_slice(),
            u,
        );
        self.input_bounds.clip(u);
    }
}

impl Policy for TrackingPolicy {
    fn control(&self, t: f64, x: &[f64], u: &mut [f64]) {
        self.ancillary(t, x, u);
    }
}

/// Runs `first` before `switch_time`, `then` from it on.
#[derive(Clone)]
pub struct SwitchedPolicy {
    pub first: Arc<dyn Policy>,
    pub switch_time: f64,
    pub then: Arc<dyn Policy>,
}

impl Policy for SwitchedPolicy {
    fn control(&self, t: f64, x: &[f64], u: &mut [f64]) {
        if t < self.switch_time - 1e-9 {
            self.first.control(t, x, u);
        } else {
            self.then.control(t, x, u);
        }
    }
}

/// Sampled tube settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TubeConfig {
    pub n_tube: usize,
    pub n_holdout: usize,
    pub inflation: f64,
    /// Additive margin on every radius, in state (or input) units.
    pub margin: f64,
    /// Half-width, in samples, of the sliding max applied to the envelope.
    pub window: usize,
    /// Make radii non-decreasing in time.
    pub monotone: bool,
}

impl Default for TubeConfig {
    fn default() -> Self {
        Self {
            n_tube: 100,
            n_holdout: 100,
            inflation: 1.2,
            margin: 5e-3,
            window: 10,
            monotone: true,
        }
    }
}

/// Per-sample deviation bounds of closed-loop rollouts around a nominal.
#[derive(Clone, Debug, PartialEq)]
pub struct Tube {
    /// State radius per nominal sample.
    pub radii: Vec<DVector<f64>>,
    /// Input radius per nominal interval, before saturation.
    pub input_radii: Vec<DVector<f64>>,
}

impl Tube {
    pub fn zeros(nominal: &Trajectory, margin: f64) -> Self {
        let n = nominal.states[0].len();
        let m = nominal.inputs.first().map_or(0, |u| u.len());
        Self {
            radii: vec![DVector::from_element(n, margin); nominal.len()],
            input_radii: vec![DVector::from_element(m, margin); nominal.inputs.len()],
        }
    }

    /// Elementwise max with `other` (same grid).
    pub fn max_with(&mut self, other: &Tube) {
        for (a, b) in self.radii.iter_mut().zip(&other.radii) {
            *a = a.sup(b);
        }
        for (a, b) in self.input_radii.iter_mut().zip(&other.input_radii) {
            *a = a.sup(b);
        }
    }

    /// Largest amount by which the nominal, shrunk sets minus the tube, is
    /// violated; `<= 0` means every sample fits.
    pub fn tightened_violation(&self, nominal: &Trajectory, set: &dyn StateSet, inputs: &Bounds) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for (x, r) in nominal.states.iter().zip(&self.radii) {
            worst = worst.max(set.violation(x.as_slice(), r.as_slice()));
        }
        for (u, r) in nominal.inputs.iter().zip(&self.input_radii) {
            worst = worst.max(inputs.violation(u.as_slice(), r.as_slice()));
        }
        worst
    }
}

struct Deviation {
    state: Vec<DVector<f64>>,
    input: Vec<DVector<f64>>,
}

/// Closed-loop rollouts tracking `nominal` under `theta ~ U(bx)` and fresh
/// disturbance; returns each rollout's per-sample absolute deviation.
fn deviations(
    model: &ModelSpec,
    nominal: &Arc<Trajectory>,
    law: &Arc<dyn TrackingLaw>,
    bx: &ParameterBox,
    count: usize,
    seed: u64,
) -> Result<Vec<Deviation>> {
    let policy = TrackingPolicy::new(nominal.clone(), law.clone(), model.input_bounds.clone());
    let steps = nominal.inputs.len();
    let m = model.m();
    (0..count)
        .into_par_iter()
        .map(|l| {
            let mut rng = seeding::rng(seeding::derive_seed(seed, l as u64));
            let theta = bx.sample_uniform(&mut rng);
            let n = model.n();
            let mut dev = Deviation {
                state: vec![DVector::zeros(n); steps + 1],
                input: vec![DVector::zeros(m); steps],
            };
            let mut raw = [0.0; MAX_INPUT];
            Simulator::new(model, theta.as_slice()).run(
                &policy,
                nominal.states[0].as_slice(),
                nominal.start_time(),
                steps,
                &mut rng,
                |k, _, x, _| {
                    let xn = &nominal.states[k + 1];
                    for i in 0..n {
                        dev.state[k + 1][i] = (x[i] - xn[i]).abs();
                    }
                    if k + 1 < steps {
                        let un = &nominal.inputs[k + 1];
                        law.command(x, xn.as_slice(), un.as_slice(), &mut raw[..m]);
                        for i in 0..m {
                            dev.input[k + 1][i] = (raw[i] - un[i]).abs();
                        }
                    }
                    ControlFlow::Continue(())
                },
            )?;
            Ok(dev)
        })
        .collect()
}

/// Per-sample max deviation over `cfg.n_tube` rollouts, widened over a
/// sliding window, inflated and offset by the margin.
pub fn estimate_tube(
    model: &ModelSpec,
    nominal: &Arc<Trajectory>,
    law: &Arc<dyn TrackingLaw>,
    bx: &ParameterBox,
    cfg: &TubeConfig,
    seed: u64,
) -> Result<Tube> {
    let devs = deviations(model, nominal, law, bx, cfg.n_tube, seed)?;
    let mut tube = Tube::zeros(nominal, 0.0);
    for d in &devs {
        for (a, b) in tube.radii.iter_mut().zip(&d.state) {
            *a = a.sup(b);
        }
        for (a, b) in tube.input_radii.iter_mut().zip(&d.input) {
            *a = a.sup(b);
        }
    }
    if cfg.monotone {
        running_max(&mut tube.radii);
        running_max(&mut tube.input_radii);
    }
    sliding_max(&mut tube.radii, cfg.window);
    sliding_max(&mut tube.input_radii, cfg.window);
    let scale = |v: &mut DVector<f64>| {
        for e in v.iter_mut() {
            *e = *e * cfg.inflation + cfg.margin;
        }
    };
    tube.radii.iter_mut().for_each(scale);
    tube.input_radii.iter_mut().for_each(scale);
    Ok(tube)
}

fn running_max(v: &mut [DVector<f64>]) {
    for k in 1..v.len() {
        let prev = v[k - 1].clone();
        v[k] = v[k].sup(&prev);
    }
}

/// Replaces each entry by the componentwise max over `[k - w, k + w]`.
fn sliding_max(v: &mut [DVector<f64>], w: usize) {
    if w == 0 || v.is_empty() {
        return;
    }
    let src = v.to_vec();
    for (k, out) in v.iter_mut().enumerate() {
        for other in &src[k.saturating_sub(w)..(k + w + 1).min(src.len())] {
            *out = out.sup(other);
        }
    }
}

/// Fraction of fresh rollouts (independent seed stream) that stay inside the
/// tube at every sample.
pub fn holdout_coverage(
    model: &ModelSpec,
    nominal: &Arc<Trajectory>,
    law: &Arc<dyn TrackingLaw>,
    bx: &ParameterBox,
    tube: &Tube,
    count: usize,
    seed: u64,
) -> Result<f64> {
    if count == 0 {
        return Ok(1.0);
    }
    let devs = deviations(model, nominal, law, bx, count, seed)?;
    let inside = devs
        .iter()
        .filter(|d| {
            d.state
                .iter()
                .zip(&tube.radii)
                .all(|(a, r)| a.iter().zip(r.iter()).all(|(x, y)| x <= y))
        })
        .count();
    Ok(inside as f64 / count as f64)
}
