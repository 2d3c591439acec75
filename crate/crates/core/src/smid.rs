//! Set-membership identification over an axis-aligned parameter box.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linprog::{solve_lp, LinearProgram, LpOutcome};
use crate::models::{regression_tuples, steps_for, ModelSpec, OpenLoop, RegressionTuple, Simulator, TrajTag, Trajectory};

/// Axis-aligned hyperrectangle of parameters, `lo <= theta <= hi`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterBox {
    lo: DVector<f64>,
    hi: DVector<f64>,
}

impl ParameterBox {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        check_dim("parameter box", lo.len(), hi.len())?;
        if lo.is_empty() {
            return Err(Error::Contract("parameter box must have dimension >= 1".into()));
        }
        for i in 0..lo.len() {
            if !(lo[i].is_finite() && hi[i].is_finite() && lo[i] <= hi[i]) {
                return Err(Error::Contract(format!(
                    "invalid parameter interval [{}, {}]",
                    lo[i], hi[i]
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn from_slices(lo: &[f64], hi: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(lo), DVector::from_column_slice(hi))
    }

    pub fn point(theta: DVector<f64>) -> Result<Self> {
        Self::new(theta.clone(), theta)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &DVector<f64> {
        &self.lo
    }

    pub fn hi(&self) -> &DVector<f64> {
        &self.hi
    }

    pub fn midpoint(&self) -> DVector<f64> {
        (&self.lo + &self.hi) * 0.5
    }

    pub fn axis_widths(&self) -> DVector<f64> {
        &self.hi - &self.lo
    }

    pub fn contains(&self, theta: &DVector<f64>) -> bool {
        theta.len() == self.dim()
            && (0..self.dim()).all(|i| self.lo[i] <= theta[i] && theta[i] <= self.hi[i])
    }

    pub fn is_subset_of(&self, other: &ParameterBox, tol: f64) -> bool {
        self.dim() == other.dim()
            && (0..self.dim())
                .all(|i| self.lo[i] >= other.lo[i] - tol && self.hi[i] <= other.hi[i] + tol)
    }

    pub fn translate(&self, a: &DVector<f64>) -> Result<Self> {
        Self::new(&self.lo + a, &self.hi + a)
    }

    /// `sum_i |d_i| (hi_i - lo_i)`.
    pub fn width(&self, d: &DVector<f64>) -> Result<f64> {
        check_dim("direction", self.dim(), d.len())?;
        if (d.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Contract("width direction must have unit norm".into()));
        }
        Ok(self.width_unchecked(d))
    }

    fn width_unchecked(&self, d: &DVector<f64>) -> f64 {
        (0..self.dim())
            .map(|i| d[i].abs() * (self.hi[i] - self.lo[i]))
            .sum()
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| {
            if self.hi[i] > self.lo[i] {
                rng.gen_range(self.lo[i]..=self.hi[i])
            } else {
                self.lo[i]
            }
        })
    }

    /// All `2^p` corners.
    pub fn corners(&self) -> Vec<DVector<f64>> {
        let p = self.dim();
        (0..1usize << p)
            .map(|mask| {
                DVector::from_fn(p, |i, _| {
                    if mask >> i & 1 == 1 {
                        self.hi[i]
                    } else {
                        self.lo[i]
                    }
                })
            })
            .collect()
    }
}

/// Unit directions along which width is measured.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionSet {
    dirs: Vec<DVector<f64>>,
}

impl DirectionSet {
    pub fn axes(p: usize) -> Self {
        Self {
            dirs: (0..p)
                .map(|i| DVector::from_fn(p, |j, _| if i == j { 1.0 } else { 0.0 }))
                .collect(),
        }
    }

    pub fn new(dirs: Vec<DVector<f64>>) -> Result<Self> {
        if dirs.is_empty() {
            return Err(Error::Contract("direction set is empty".into()));
        }
        let p = dirs[0].len();
        for d in &dirs {
            check_dim("direction", p, d.len())?;
            if (d.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::Contract("directions must have unit norm".into()));
            }
        }
        Ok(Self { dirs })
    }

    pub fn dirs(&self) -> &[DVector<f64>] {
        &self.dirs
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn widths(&self, b: &ParameterBox) -> Vec<f64> {
        self.dirs.iter().map(|d| b.width_unchecked(d)).collect()
    }
}

/// Mean width reduction over the directions; `after` must be inside `before`.
pub fn avg_width_reduction(
    before: &ParameterBox,
    after: &ParameterBox,
    dirs: &DirectionSet,
) -> Result<f64> {
    if !after.is_subset_of(before, 1e-12) {
        return Err(Error::Contract("updated box is not inside the prior box".into()));
    }
    let total: f64 = dirs
        .dirs()
        .iter()
        .map(|d| before.width_unchecked(d) - after.width_unchecked(d))
        .sum();
    Ok((total / dirs.len() as f64).max(0.0))
}

/// Stored regression tuples that drive the bound updates and the excitation check.
#[derive(Clone, Debug)]
pub struct HistoryStack {
    tuples: Vec<RegressionTuple>,
    gram: DMatrix<f64>,
    capacity: usize,
    admission_threshold: f64,
    min_fill: usize,
}

fn lambda_min(g: &DMatrix<f64>) -> f64 {
    if g.nrows() == 1 {
        return g[(0, 0)];
    }
    SymmetricEigen::new(g.clone()).eigenvalues.min()
}

fn outer(t: &RegressionTuple) -> DMatrix<f64> {
    t.fmat.transpose() * &t.fmat
}

impl HistoryStack {
    pub fn new(param_dim: usize, capacity: usize, admission_threshold: f64) -> Self {
        Self {
            tuples: Vec::new(),
            gram: DMatrix::zeros(param_dim, param_dim),
            capacity: capacity.max(1),
            admission_threshold,
            min_fill: param_dim,
        }
    }

    pub fn tuples(&self) -> &[RegressionTuple] {
        &self.tuples
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Smallest eigenvalue of `sum_j F_j^T F_j`.
    pub fn excitation(&self) -> f64 {
        lambda_min(&self.gram)
    }

    /// Admits `tuple` if it adds excitation (or the stack is under-filled); a
    /// full stack swaps out the entry whose removal costs the least.
    pub fn try_admit(&mut self, tuple: RegressionTuple) -> Result<bool> {
        check_dim("tuple parameters", self.gram.ncols(), tuple.fmat.ncols())?;
        check_dim("tuple rows", tuple.y.len(), tuple.fmat.nrows())?;
        if tuple.y.iter().chain(tuple.fmat.iter()).any(|v| !v.is_finite()) {
            return Ok(false);
        }
        let add = outer(&tuple);
        let current = lambda_min(&self.gram);
        if self.tuples.len() < self.min_fill {
            self.gram += add;
            self.tuples.push(tuple);
            return Ok(true);
        }
        if self.tuples.len() < self.capacity {
            let with = &self.gram + &add;
            if lambda_min(&with) - current >= self.admission_threshold {
                self.gram = with;
                self.tuples.push(tuple);
                return Ok(true);
            }
            return Ok(false);
        }
        let (drop, _) = self
            .tuples
            .iter()
            .enumerate()
            .map(|(j, t)| (j, lambda_min(&(&self.gram - outer(t)))))
            .fold((0, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best });
        let swapped = &self.gram - outer(&self.tuples[drop]) + &add;
        if lambda_min(&swapped) - current >= self.admission_threshold {
            self.gram = swapped;
            self.tuples[drop] = tuple;
            return Ok(true);
        }
        Ok(false)
    }
}

/// Finite-excitation test `lambda_min(sum F^T F) >= lambda_fe`.
pub fn check_fe(stack: &HistoryStack, lambda_fe: f64) -> Result<bool> {
    if !(lambda_fe > 0.0) {
        return Err(Error::Contract("excitation threshold must be positive".into()));
    }
    Ok(!stack.is_empty() && stack.excitation() >= lambda_fe)
}

/// Result of one bound update.
#[derive(Clone, Debug, PartialEq)]
pub struct SmidUpdate {
    pub bounds: ParameterBox,
    /// False when the data contradicted the prior box; `bounds` is then the prior.
    pub consistent: bool,
}

/// Tightens `prior` to the parameters consistent with `|Y_j - F_j theta| <= eps`.
///
/// Each bound is the value of a small LP in dual form
/// `min h^T y, G^T y = +-e_i, y >= 0`, which has only `p` equality rows. The
/// prior's own faces keep the dual feasible; an unbounded dual means the data
/// is inconsistent with the prior.
pub fn smid_update(prior: &ParameterBox, tuples: &[RegressionTuple], eps: f64) -> Result<SmidUpdate> {
    if !(eps > 0.0) {
        return Err(Error::Contract("eps must be positive".into()));
    }
    let p = prior.dim();
    let mut g: Vec<(DVector<f64>, f64)> = Vec::new();
    for t in tuples {
        check_dim("tuple parameters", p, t.fmat.ncols())?;
        for r in 0..t.fmat.nrows() {
            let row = t.fmat.row(r).transpose();
            if row.amax() <= 1e-12 {
                continue;
            }
            g.push((row.clone(), t.y[r] + eps));
            g.push((-row, eps - t.y[r]));
        }
    }
    if g.is_empty() {
        return Ok(SmidUpdate {
            bounds: prior.clone(),
            consistent: true,
        });
    }
    for i in 0..p {
        let mut e = DVector::zeros(p);
        e[i] = 1.0;
        g.push((e.clone(), prior.hi[i]));
        g.push((-e, -prior.lo[i]));
    }
    let cols = g.len();
    let mut gt = DMatrix::zeros(p, cols);
    let mut h = DVector::zeros(cols);
    for (c, (row, rhs)) in g.iter().enumerate() {
        gt.set_column(c, row);
        h[c] = *rhs;
    }
    let mut lo = prior.lo.clone();
    let mut hi = prior.hi.clone();
    for i in 0..p {
        for sign in [1.0, -1.0] {
            let mut target = DVector::zeros(p);
            target[i] = sign;
            let lp = LinearProgram::new(h.clone()).with_eq(gt.clone(), target);
            let value = match solve_lp(&lp)? {
                LpOutcome::Optimal { value, .. } => value,
                LpOutcome::Unbounded | LpOutcome::Infeasible => {
                    log::warn!("set-membership data inconsistent with prior box; keeping prior");
                    return Ok(SmidUpdate {
                        bounds: prior.clone(),
                        consistent: false,
                    });
                }
            };
            // Relax by rounding noise, then intersect with the prior.
            let slack = 1e-9 * (1.0 + value.abs());
            if sign > 0.0 {
                hi[i] = (value + slack).min(prior.hi[i]);
            } else {
                lo[i] = (-value - slack).max(prior.lo[i]);
            }
        }
        if lo[i] > hi[i] {
            let mid = 0.5 * (lo[i] + hi[i]);
            lo[i] = mid;
            hi[i] = mid;
        }
    }
    Ok(SmidUpdate {
        bounds: ParameterBox::new(lo, hi)?,
        consistent: true,
    })
}

/// Slack used by the bound update: disturbance term plus a quadrature margin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsCalibration {
    pub eps: f64,
    pub c_quad: f64,
}

/// `eps = w_bar * window * sqrt(n) + c_quad * dt^2`, with `c_quad` measured by
/// replaying each probe's inputs at every corner of `theta_box` on the model
/// grid and on a 10x refined grid, noise-free.
pub fn calibrate_eps(
    model: &ModelSpec,
    probes: &[Trajectory],
    window: f64,
    theta_box: &ParameterBox,
    safety: f64,
) -> Result<EpsCalibration> {
    let dt = model.dt;
    let mut fine = model.clone();
    fine.dt = dt / 10.0;
    let mut worst = 0.0f64;
    let mut thetas = theta_box.corners();
    thetas.push(theta_box.midpoint());
    let mut rng = crate::seeding::rng(0);
    for probe in probes {
        if probe.is_empty() {
            continue;
        }
        let replay = OpenLoop {
            traj: Arc::new(probe.clone()),
        };
        let x0 = probe.states[0].as_slice();
        let t0 = probe.start_time();
        let steps = steps_for(probe.duration(), dt);
        for theta in &thetas {
            let mut coarse_model = model.clone();
            coarse_model.disturbance_bound = 0.0;
            let mut fine_model = fine.clone();
            fine_model.disturbance_bound = 0.0;
            let coarse = Simulator::new(&coarse_model, theta.as_slice())
                .record(&replay, x0, t0, steps, &mut rng, TrajTag::Executed)?;
            let refined = Simulator::new(&fine_model, theta.as_slice())
                .record(&replay, x0, t0, steps * 10, &mut rng, TrajTag::Executed)?;
            let tc = regression_tuples(&coarse_model, &coarse, window)?;
            let tf = regression_tuples(&fine_model, &refined, window)?;
            for (a, b) in tc.iter().zip(&tf) {
                let ra = &a.y - &a.fmat * theta;
                let rb = &b.y - &b.fmat * theta;
                worst = worst.max((&ra - &rb).amax()).max(ra.amax());
            }
        }
    }
    let c_quad = safety * worst / (dt * dt);
    let eps = model.disturbance_bound * window * (model.n() as f64).sqrt() + c_quad * dt * dt;
    Ok(EpsCalibration {
        eps: eps.max(1e-12),
        c_quad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::test_models::quad_spec;
    use crate::models::{simulate_closed_loop, Policy};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn tuple(y: &[f64], f: &[f64], p: usize) -> RegressionTuple {
        RegressionTuple {
            y: v(y),
            fmat: DMatrix::from_row_slice(y.len(), p, f),
            window: (0.0, 0.2),
        }
    }

    #[test]
    fn widths() {
        let b = ParameterBox::from_slices(&[0.0, 0.0], &[0.5, 0.8]).unwrap();
        assert_abs_diff_eq!(b.width(&v(&[1.0, 0.0])).unwrap(), 0.5);
        let p = ParameterBox::point(v(&[0.3, 0.1])).unwrap();
        assert_eq!(p.width(&v(&[0.6, 0.8])).unwrap(), 0.0);
        let u = ParameterBox::from_slices(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let d = v(&[1.0, 1.0]) / 2f64.sqrt();
        assert_abs_diff_eq!(u.width(&d).unwrap(), 2f64.sqrt(), epsilon = 1e-15);
        assert!(u.width(&v(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn reduction_examples() {
        let axes1 = DirectionSet::axes(1);
        let a = ParameterBox::from_slices(&[0.0], &[1.0]).unwrap();
        let b = ParameterBox::from_slices(&[0.25], &[0.75]).unwrap();
        assert_eq!(avg_width_reduction(&a, &a, &axes1).unwrap(), 0.0);
        assert_abs_diff_eq!(avg_width_reduction(&a, &b, &axes1).unwrap(), 0.5);
        assert!(avg_width_reduction(&b, &a, &axes1).is_err());

        let before = ParameterBox::from_slices(&[0.0, 0.0], &[0.5, 0.8]).unwrap();
        let after = ParameterBox::from_slices(&[0.0, 0.25], &[0.33, 0.34]).unwrap();
        let r = avg_width_reduction(&before, &after, &DirectionSet::axes(2)).unwrap();
        assert_abs_diff_eq!(r, 0.44, epsilon = 1e-12);
    }

    #[test]
    fn admission_rules() {
        let mut s = HistoryStack::new(1, 50, 1e-4);
        assert!(s.try_admit(tuple(&[1.0], &[1.0], 1)).unwrap());
        assert!(s.try_admit(tuple(&[1.0], &[1.0], 1)).unwrap(), "p = 1 still gains excitation");

        let mut s = HistoryStack::new(2, 50, 1e-4);
        let a = tuple(&[1.0], &[1.0, 0.0], 2);
        let b = tuple(&[1.0], &[0.0, 1.0], 2);
        assert!(s.try_admit(a.clone()).unwrap());
        assert!(s.try_admit(b.clone()).unwrap());
        // Oracle: Gram of e1 e1^T + e2 e2^T is the identity.
        assert_abs_diff_eq!(s.excitation(), 1.0, epsilon = 1e-12);
        // Exciting only e1 again leaves lambda_min at 1 -> no gain.
        let before = s.len();
        assert!(!s.try_admit(a).unwrap());
        assert_eq!(s.len(), before);
        assert!(s.try_admit(tuple(&[1.0, 1.0], &[1.0, 0.0, 0.0, 1.0], 2)).unwrap());
    }

    #[test]
    fn duplicate_is_rejected_once_filled() {
        let mut s = HistoryStack::new(2, 50, 1e-4);
        let t = tuple(&[0.0, 0.0], &[1.0, 0.2, 0.1, 1.0], 2);
        s.try_admit(t.clone()).unwrap();
        s.try_admit(tuple(&[0.0], &[0.0, 1.0], 2)).unwrap();
        let g_before = s.excitation();
        // Adding the same rows again increases lambda_min, but by a computable
        // amount; with a huge threshold it must be rejected.
        let mut strict = s.clone();
        strict.admission_threshold = 10.0;
        assert!(!strict.try_admit(t).unwrap());
        assert_eq!(strict.excitation(), g_before);
    }

    #[test]
    fn full_stack_swaps_weakest() {
        let mut s = HistoryStack::new(1, 2, 1e-4);
        s.try_admit(tuple(&[0.0], &[0.1], 1)).unwrap();
        s.try_admit(tuple(&[0.0], &[1.0], 1)).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.try_admit(tuple(&[0.0], &[2.0], 1)).unwrap());
        assert_eq!(s.len(), 2);
        assert_abs_diff_eq!(s.excitation(), 5.0, epsilon = 1e-12);
        assert!(!s.try_admit(tuple(&[0.0], &[0.5], 1)).unwrap());
    }

    #[test]
    fn fe_examples() {
        let mut s = HistoryStack::new(2, 50, 1e-4);
        assert!(!check_fe(&s, 0.5).unwrap());
        s.try_admit(tuple(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0], 2)).unwrap();
        assert!(check_fe(&s, 0.5).unwrap());
        assert!(check_fe(&s, 0.0).is_err());

        let mut one = HistoryStack::new(2, 50, 1e-4);
        one.try_admit(tuple(&[0.0], &[1.0, 0.0], 2)).unwrap();
        one.try_admit(tuple(&[0.0], &[3.0, 0.0], 2)).unwrap();
        assert!(!check_fe(&one, 1e-12).unwrap());
    }

    #[test]
    fn scalar_update_by_hand() {
        let prior = ParameterBox::from_slices(&[0.0], &[2.0]).unwrap();
        let up = smid_update(&prior, &[tuple(&[1.0], &[1.0], 1)], 0.1).unwrap();
        assert!(up.consistent);
        assert_abs_diff_eq!(up.bounds.lo()[0], 0.9, epsilon = 1e-8);
        assert_abs_diff_eq!(up.bounds.hi()[0], 1.1, epsilon = 1e-8);
    }

    #[test]
    fn loose_eps_leaves_box_unchanged() {
        let prior = ParameterBox::from_slices(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        // max over the box of |Y - F theta| is 1.5 + 1 = 2.5.
        let t = tuple(&[1.5], &[1.0, 1.0], 2);
        let up = smid_update(&prior, &[t], 2.5).unwrap();
        assert!(up.bounds.is_subset_of(&prior, 0.0));
        assert!(prior.is_subset_of(&up.bounds, 1e-8));
    }

    #[test]
    fn inconsistent_data_keeps_prior() {
        let prior = ParameterBox::from_slices(&[0.0], &[1.0]).unwrap();
        let up = smid_update(&prior, &[tuple(&[5.0], &[1.0], 1)], 0.1).unwrap();
        assert!(!up.consistent);
        assert_eq!(up.bounds, prior);
    }

    #[test]
    fn two_parameter_case_tightens_both() {
        // Vector-drag style rows at two speeds with true (0.1, 0.3).
        let theta = v(&[0.1, 0.3]);
        let rows = [(-0.2, -0.2), (-0.6, -1.8), (-0.4, -0.8)];
        let tuples: Vec<_> = rows
            .iter()
            .map(|&(a, b)| {
                let f = DMatrix::from_row_slice(1, 2, &[a, b]);
                RegressionTuple {
                    y: &f * &theta,
                    fmat: f,
                    window: (0.0, 0.2),
                }
            })
            .collect();
        let prior = ParameterBox::from_slices(&[0.0, 0.0], &[0.5, 0.8]).unwrap();
        let up = smid_update(&prior, &tuples, 0.02).unwrap();
        let w0 = prior.axis_widths();
        let w1 = up.bounds.axis_widths();
        assert!(w1[0] < w0[0] && w1[1] < w0[1]);
        assert!(up.bounds.contains(&theta));
    }

    /// Grid-scan oracle of the feasible set's bounding box.
    fn grid_bounds(prior: &ParameterBox, tuples: &[RegressionTuple], eps: f64) -> Option<(Vec<f64>, Vec<f64>)> {
        let step = 1e-3;
        let p = prior.dim();
        let n: Vec<usize> = (0..p)
            .map(|i| ((prior.hi()[i] - prior.lo()[i]) / step + 1e-9).floor() as usize + 1)
            .collect();
        let mut lo = vec![f64::INFINITY; p];
        let mut hi = vec![f64::NEG_INFINITY; p];
        let total: usize = n.iter().product();
        for flat in 0..total {
            let mut k = flat;
            let th = DVector::from_fn(p, |i, _| {
                let idx = k % n[i];
                k /= n[i];
                prior.lo()[i] + idx as f64 * step
            });
            if tuples.iter().all(|t| (&t.y - &t.fmat * &th).amax() <= eps) {
                for i in 0..p {
                    lo[i] = lo[i].min(th[i]);
                    hi[i] = hi[i].max(th[i]);
                }
            }
        }
        lo[0].is_finite().then_some((lo, hi))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn matches_grid_scan(
            p in 1usize..3, k in 1usize..6,
            vals in proptest::collection::vec(-1.0..1.0f64, 30),
            truth in proptest::collection::vec(0.2..0.8f64, 2),
        ) {
            let prior = ParameterBox::new(DVector::zeros(p), DVector::from_element(p, 1.0)).unwrap();
            let theta = DVector::from_column_slice(&truth[..p]);
            let eps = 0.05;
            let tuples: Vec<_> = (0..k).map(|j| {
                let f = DMatrix::from_fn(1, p, |_, c| vals[j * 3 + c]);
                let noise = 0.5 * eps * vals[20 + j];
                RegressionTuple { y: &f * &theta + DVector::from_element(1, noise), fmat: f, window: (0.0, 0.2) }
            }).collect();
            let up = smid_update(&prior, &tuples, eps).unwrap();
            prop_assert!(up.consistent);
            prop_assert!(up.bounds.contains(&theta));
            // Every feasible grid point lies inside the LP bounds, and rounding
            // the LP's extreme points to the grid stays feasible once eps is
            // dilated by step * |F_j|_1 / 2, so the dilated scan reaches within
            // one step of each LP bound.
            let step = 1e-3;
            let (ilo, ihi) = grid_bounds(&prior, &tuples, eps).unwrap();
            let dil = tuples.iter().map(|t| t.fmat.row(0).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
            let (olo, ohi) = grid_bounds(&prior, &tuples, eps + 0.5 * step * dil + 1e-12).unwrap();
            for i in 0..p {
                let (lo, hi) = (up.bounds.lo()[i], up.bounds.hi()[i]);
                prop_assert!(lo <= ilo[i] + 1e-9 && ihi[i] <= hi + 1e-9);
                prop_assert!(olo[i] <= lo + step + 1e-9 && ohi[i] >= hi - step - 1e-9);
            }
        }

        #[test]
        fn nested_and_monotone(
            vals in proptest::collection::vec(-1.0..1.0f64, 40),
        ) {
            let theta = v(&[0.3, 0.6]);
            let eps = 0.05;
            let mut b = ParameterBox::from_slices(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
            let dirs = DirectionSet::new(vec![v(&[1.0, 0.0]), v(&[0.6, 0.8])]).unwrap();
            for j in 0..8 {
                let f = DMatrix::from_row_slice(1, 2, &[vals[2 * j], vals[2 * j + 1]]);
                let t = RegressionTuple { y: &f * &theta + DVector::from_element(1, eps * vals[20 + j]), fmat: f, window: (0.0, 0.2) };
                let up = smid_update(&b, &[t], eps).unwrap();
                prop_assert!(up.bounds.is_subset_of(&b, 0.0));
                prop_assert!(up.bounds.contains(&theta));
                for (w0, w1) in dirs.widths(&b).iter().zip(dirs.widths(&up.bounds)) {
                    prop_assert!(w1 <= *w0);
                }
                b = up.bounds;
            }
        }

        #[test]
        fn width_is_translation_invariant(
            lo in proptest::collection::vec(-1.0..1.0f64, 3),
            w in proptest::collection::vec(0.0..2.0f64, 3),
            a in proptest::collection::vec(-5.0..5.0f64, 3),
            d in proptest::collection::vec(-1.0..1.0f64, 3),
        ) {
            let dn = v(&d);
            prop_assume!(dn.norm() > 1e-3);
            let dn = &dn / dn.norm();
            let lo = v(&lo);
            let b = ParameterBox::new(lo.clone(), &lo + v(&w)).unwrap();
            let shifted = b.translate(&v(&a)).unwrap();
            let (w0, w1) = (b.width(&dn).unwrap(), shifted.width(&dn).unwrap());
            prop_assert!((w0 - w1).abs() <= 1e-12 * (1.0 + w0));
        }
    }

    #[test]
    fn calibrated_eps_covers_quadrature_error() {
        let spec = quad_spec(0.05, 0.3);
        let pol = |t: f64, _x: &[f64], u: &mut [f64]| {
            u.copy_from_slice(&[4.0 * (1.3 * t).sin(), 3.0 * (0.7 * t).cos(), 9.81 + (2.0 * t).sin()])
        };
        let probe = simulate_closed_loop(&spec, &pol as &dyn Policy, &DVector::zeros(6), (0.0, 4.0), &spec.true_theta, 1).unwrap();
        let b = ParameterBox::from_slices(&[0.0], &[0.5]).unwrap();
        let cal = calibrate_eps(&spec, &[probe.clone()], 0.2, &b, 3.0).unwrap();
        let noise_part = 0.05 * 0.2 * 6f64.sqrt();
        assert!(cal.eps >= noise_part);
        // Noisy data from the true parameter stays consistent.
        let tuples = regression_tuples(&spec, &probe, 0.2).unwrap();
        for t in &tuples {
            assert!((&t.y - &t.fmat * &spec.true_theta).amax() <= cal.eps);
        }
    }
}
