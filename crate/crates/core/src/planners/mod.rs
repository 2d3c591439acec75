//! Policy generators: robust backup plans with sampled tubes, informative
//! segments, racing planners and the pure-pursuit fallback.

pub mod car;
pub mod quad;
pub mod tracking;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelSpec, Trajectory, MAX_PARAM, MAX_STATE};

/// Weighting of the log-det information reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfoObjective {
    pub gamma: f64,
    /// Row-major `p x p` weight; empty means identity.
    pub weight: Vec<f64>,
    pub eps_reg: f64,
}

impl Default for InfoObjective {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            weight: Vec::new(),
            eps_reg: 1e-6,
        }
    }
}

impl InfoObjective {
    /// Cholesky factor `L` of the weight, `W = L L^T`.
    pub fn weight_factor(&self, p: usize) -> Result<DMatrix<f64>> {
        if self.weight.is_empty() {
            return Ok(DMatrix::identity(p, p));
        }
        if self.weight.len() != p * p {
            return Err(Error::Dimension {
                what: "information weight",
                expected: p * p,
                got: self.weight.len(),
            });
        }
        let w = DMatrix::from_row_slice(p, p, &self.weight);
        if (&w - w.transpose()).amax() > 1e-12 {
            return Err(Error::Config("information weight must be symmetric".into()));
        }
        w.cholesky()
            .map(|c| c.l())
            .ok_or_else(|| Error::Config("information weight must be positive definite".into()))
    }

    /// `log det(L^T G L + eps I)` for an accumulated Gram `G = int Phi^T Phi`.
    pub fn logdet(&self, gram: &DMatrix<f64>, factor: &DMatrix<f64>) -> f64 {
        let p = gram.nrows();
        let m = factor.transpose() * gram * factor + DMatrix::identity(p, p) * self.eps_reg;
        match m.cholesky() {
            Some(c) => 2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
            None => f64::NEG_INFINITY,
        }
    }
}

/// Running trapezoid accumulation of `Phi^T Phi` along a rollout.
#[derive(Clone, Debug)]
pub struct GramAccumulator {
    p: usize,
    gram: [f64; MAX_PARAM * MAX_PARAM],
}

impl GramAccumulator {
    pub fn new(p: usize) -> Self {
        Self {
            p,
            gram: [0.0; MAX_PARAM * MAX_PARAM],
        }
    }

    fn outer(model: &ModelSpec, x: &[f64], u: &[f64]) -> [f64; MAX_PARAM * MAX_PARAM] {
        let (n, p) = (model.n(), model.p());
        let mut phi = [0.0; MAX_STATE * MAX_PARAM];
        model.dynamics.regressor(x, u, &mut phi[..n * p]);
        let mut g = [0.0; MAX_PARAM * MAX_PARAM];
        for r in 0..n {
            for a in 0..p {
                let va = phi[r * p + a];
                if va == 0.0 {
                    continue;
                }
                for b in 0..p {
                    g[a * p + b] += va * phi[r * p + b];
                }
            }
        }
        g
    }

    /// Adds the interval from the previous sample to `(x_next)`, both ends
    /// evaluated with the interval's input `u`.
    pub fn step(&mut self, model: &ModelSpec, x_prev: &[f64], u: &[f64], x_next: &[f64], dt: f64) {
        let a = Self::outer(model, x_prev, u);
        let b = Self::outer(model, x_next, u);
        for i in 0..self.p * self.p {
            self.gram[i] += 0.5 * dt * (a[i] + b[i]);
        }
    }

    pub fn gram(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.p, self.p, &self.gram[..self.p * self.p])
    }
}

/// `int Phi^T Phi dt` along a recorded trajectory.
pub fn information_gram(model: &ModelSpec, traj: &Trajectory) -> DMatrix<f64> {
    let mut acc = GramAccumulator::new(model.p());
    for k in 0..traj.inputs.len() {
        acc.step(
            model,
            traj.states[k].as_slice(),
            traj.inputs[k].as_slice(),
            traj.states[k + 1].as_slice(),
            traj.times[k + 1] - traj.times[k],
        );
    }
    acc.gram()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::test_models::quad_spec;
    use crate::models::{Simulator, TrajTag};
    use crate::seeding::rng;
    use approx::assert_relative_eq;

    fn accelerate(t: f64, _x: &[f64], u: &mut [f64]) {
        u.copy_from_slice(&[3.0 * (t * 2.0).cos(), 1.0, 9.81]);
    }

    #[test]
    fn scalar_logdet_matches_dense_quadrature() {
        let model = quad_spec(0.0, 0.3);
        let traj = Simulator::new(&model, &[0.3])
            .record(&accelerate, &[0.0; 6], 0.0, 100, &mut rng(0), TrajTag::Nominal)
            .unwrap();
        let obj = InfoObjective {
            weight: vec![2.5],
            ..Default::default()
        };
        let l = obj.weight_factor(1).unwrap();
        let got = obj.logdet(&information_gram(&model, &traj), &l);

        let mut fine = model.clone();
        fine.dt /= 10.0;
        let dense = Simulator::new(&fine, &[0.3])
            .record(&accelerate, &[0.0; 6], 0.0, 1000, &mut rng(0), TrajTag::Nominal)
            .unwrap();
        // |Phi|^2 = |v|^4 for the scalar drag column.
        let integral: f64 = (0..dense.inputs.len())
            .map(|k| {
                let f = |x: &nalgebra::DVector<f64>| x.rows(3, 3).norm().powi(4);
                0.5 * fine.dt * (f(&dense.states[k]) + f(&dense.states[k + 1]))
            })
            .sum();
        assert_relative_eq!(got, (2.5 * integral + 1e-6).ln(), max_relative = 1e-3);
    }

    #[test]
    fn logdet_grows_with_horizon() {
        let model = quad_spec(0.0, 0.3);
        let traj = Simulator::new(&model, &[0.3])
            .record(&accelerate, &[0.0; 6], 0.0, 150, &mut rng(0), TrajTag::Nominal)
            .unwrap();
        let obj = InfoObjective::default();
        let l = obj.weight_factor(1).unwrap();
        let mut last = f64::NEG_INFINITY;
        for k in (10..=150).step_by(10) {
            let v = obj.logdet(&information_gram(&model, &traj.restrict(0.0, k as f64 * 0.02)), &l);
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn weight_validation() {
        let bad = InfoObjective {
            weight: vec![1.0, 2.0, 2.0, 1.0],
            ..Default::default()
        };
        assert!(bad.weight_factor(2).is_err());
        let asym = InfoObjective {
            weight: vec![1.0, 0.5, 0.0, 1.0],
            ..Default::default()
        };
        assert!(asym.weight_factor(2).is_err());
        assert!(InfoObjective::default().weight_factor(3).is_ok());
    }
}
