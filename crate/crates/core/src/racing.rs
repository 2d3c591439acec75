//! Planar dynamic bicycle with Pacejka lateral tires, and closed track geometry.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::constraints::StateSet;
use crate::error::{Error, Result};
use crate::models::ControlAffine;

const G: f64 = 9.81;

pub const PX: usize = 0;
pub const PY: usize = 1;
pub const PSI: usize = 2;
pub const VX: usize = 3;
pub const VY: usize = 4;
pub const OMEGA: usize = 5;
pub const STEER: usize = 6;

pub const DRIVE: usize = 0;
pub const BRAKE: usize = 1;
pub const STEER_RATE: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CarParams {
    pub m: f64,
    pub l_f: f64,
    pub l_r: f64,
    pub j_z: f64,
    pub b_f: f64,
    pub c_f: f64,
    pub b_r: f64,
    pub c_r: f64,
    pub rho: f64,
    pub a_front: f64,
    pub c_d_aero: f64,
    pub k_d: f64,
    pub k_b: f64,
    pub f_r: f64,
    /// Regularizer in the slip-angle denominators.
    pub slip_eps: f64,
}

impl Default for CarParams {
    fn default() -> Self {
        Self {
            m: 3.5,
            l_f: 0.16,
            l_r: 0.16,
            j_z: 0.1,
            b_f: 5.0,
            c_f: 1.5,
            b_r: 5.0,
            c_r: 1.5,
            rho: 1.225,
            a_front: 0.05,
            c_d_aero: 0.5,
            k_d: 0.5,
            k_b: 0.5,
            f_r: 0.02,
            slip_eps: 0.1,
        }
    }
}

impl CarParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.l_f > 0.0 && self.l_r > 0.0 && self.m > 0.0 && self.j_z > 0.0) {
            return Err(Error::Config("car lengths, mass and inertia must be positive".into()));
        }
        if !(self.slip_eps > 0.0) {
            return Err(Error::Config("slip_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn wheelbase(&self) -> f64 {
        self.l_f + self.l_r
    }

    /// Normal loads `(F_zf, F_zr)` as printed: per wheel of each axle.
    pub fn normal_loads(&self) -> (f64, f64) {
        let l = self.wheelbase();
        (
            self.m * G * self.l_r / (2.0 * l),
            self.m * G * self.l_f / (2.0 * l),
        )
    }

    pub fn slip_angles(&self, x: &[f64]) -> (f64, f64) {
        let den = x[VX] + self.slip_eps;
        let af = x[STEER] - ((self.l_f * x[OMEGA] + x[VY]) / den).atan();
        let ar = ((self.l_r * x[OMEGA] - x[VY]) / den).atan();
        (af, ar)
    }

    /// Lateral forces with friction factored out.
    pub fn unit_lateral_forces(&self, x: &[f64]) -> (f64, f64) {
        let (af, ar) = self.slip_angles(x);
        let (fzf, fzr) = self.normal_loads();
        (
            fzf * (self.c_f * (self.b_f * af).atan()).sin(),
            fzr * (self.c_r * (self.b_r * ar).atan()).sin(),
        )
    }

    /// Longitudinal forces `(F_xf, F_xr)`.
    pub fn longitudinal_forces(&self, u: &[f64]) -> (f64, f64) {
        let l = self.wheelbase();
        let roll_f = 0.5 * self.f_r * self.m * G * self.l_r / l;
        let roll_r = 0.5 * self.f_r * self.m * G * self.l_f / l;
        (
            0.5 * self.k_d * u[DRIVE] + 0.5 * self.k_b * u[BRAKE] - roll_f,
            0.5 * (1.0 - self.k_d) * u[DRIVE] + 0.5 * (1.0 - self.k_b) * u[BRAKE] - roll_r,
        )
    }

    fn aero(&self, vx: f64) -> f64 {
        0.5 * self.rho * self.a_front * self.c_d_aero * vx * vx
    }
}

/// The car with friction `mu` as its single uncertain parameter.
#[derive(Clone, Debug, Default)]
pub struct Car {
    pub params: CarParams,
}

impl Car {
    pub fn new(params: CarParams) -> Self {
        Self { params }
    }
}

impl ControlAffine for Car {
    fn name(&self) -> &'static str {
        "racing"
    }
    fn state_dim(&self) -> usize {
        7
    }
    fn input_dim(&self) -> usize {
        3
    }
    fn param_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let p = &self.params;
        let (s, c) = x[PSI].sin_cos();
        let (sd, cd) = x[STEER].sin_cos();
        let (fxf, fxr) = p.longitudinal_forces(&[0.0, 0.0, 0.0]);
        out[PX] = x[VX] * c - x[VY] * s;
        out[PY] = x[VX] * s + x[VY] * c;
        out[PSI] = x[OMEGA];
        out[VX] = (2.0 * fxr + 2.0 * fxf * cd) / p.m - p.aero(x[VX]) + x[OMEGA] * x[VY];
        out[VY] = 2.0 * fxf * sd / p.m - x[OMEGA] * x[VX];
        out[OMEGA] = 2.0 * fxf * sd * p.l_f / p.j_z;
        out[STEER] = 0.0;
    }

    fn input_matrix(&self, x: &[f64], out: &mut [f64]) {
        let p = &self.params;
        let (sd, cd) = x[STEER].sin_cos();
        out.fill(0.0);
        for (col, k) in [(DRIVE, p.k_d), (BRAKE, p.k_b)] {
            out[VX * 3 + col] = ((1.0 - k) + k * cd) / p.m;
            out[VY * 3 + col] = k * sd / p.m;
            out[OMEGA * 3 + col] = k * sd * p.l_f / p.j_z;
        }
        out[STEER * 3 + STEER_RATE] = 1.0;
    }

    fn regressor(&self, x: &[f64], _u: &[f64], out: &mut [f64]) {
        let p = &self.params;
        let (sd, cd) = x[STEER].sin_cos();
        let (ff, fr) = p.unit_lateral_forces(x);
        out[..7].fill(0.0);
        out[VX] = -2.0 / p.m * sd * ff;
        out[VY] = 2.0 / p.m * (fr + cd * ff);
        out[OMEGA] = (-2.0 * p.l_r * fr + 2.0 * p.l_f * cd * ff) / p.j_z;
    }

    fn rate(&self, x: &[f64], u: &[f64], theta: &[f64], out: &mut [f64]) {
        let p = &self.params;
        let mu = theta[0];
        let (s, c) = x[PSI].sin_cos();
        let (sd, cd) = x[STEER].sin_cos();
        let (ff, fr) = p.unit_lateral_forces(x);
        let (fyf, fyr) = (mu * ff, mu * fr);
        let (fxf, fxr) = p.longitudinal_forces(u);
        out[PX] = x[VX] * c - x[VY] * s;
        out[PY] = x[VX] * s + x[VY] * c;
        out[PSI] = x[OMEGA];
        out[VX] = (2.0 * fxr + 2.0 * fxf * cd - 2.0 * fyf * sd) / p.m - p.aero(x[VX])
            + x[OMEGA] * x[VY];
        out[VY] = (2.0 * fyr + 2.0 * fyf * cd + 2.0 * fxf * sd) / p.m - x[OMEGA] * x[VX];
        out[OMEGA] = (-2.0 * fyr * p.l_r + (2.0 * fyf * cd + 2.0 * fxf * sd) * p.l_f) / p.j_z;
        out[STEER] = u[STEER_RATE];
    }
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(TAU) - PI;
    if a <= -PI {
        a += TAU;
    }
    a
}

/// Position of a point relative to the centerline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackFrame {
    /// Arc length in `[0, length)`.
    pub s: f64,
    /// Signed lateral offset, positive to the left of the driving direction.
    pub e_y: f64,
    pub e_psi: f64,
    /// Index of the nearest centerline segment.
    pub segment: usize,
}

/// Closed centerline resampled at uniform arc length.
#[derive(Clone, Debug)]
pub struct Track {
    pts: Vec<[f64; 2]>,
    heading: Vec<f64>,
    curvature: Vec<f64>,
    ds: f64,
    length: f64,
    half_width: f64,
    index: SegmentGrid,
}

/// Uniform grid listing, per cell, every segment within `reach` of it.
#[derive(Clone, Debug)]
struct SegmentGrid {
    origin: [f64; 2],
    cell: f64,
    nx: usize,
    ny: usize,
    reach: f64,
    cells: Vec<Vec<u32>>,
}

impl SegmentGrid {
    fn build(pts: &[[f64; 2]], cell: f64, reach: f64) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in pts {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let origin = [lo[0] - reach - cell, lo[1] - reach - cell];
        let nx = ((hi[0] - origin[0] + reach + cell) / cell).ceil() as usize;
        let ny = ((hi[1] - origin[1] + reach + cell) / cell).ceil() as usize;
        let mut cells = vec![Vec::new(); nx * ny];
        let n = pts.len();
        for i in 0..n {
            let (a, b) = (pts[i], pts[(i + 1) % n]);
            let x0 = ((a[0].min(b[0]) - reach - origin[0]) / cell).floor().max(0.0) as usize;
            let x1 = (((a[0].max(b[0]) + reach - origin[0]) / cell).floor() as usize).min(nx - 1);
            let y0 = ((a[1].min(b[1]) - reach - origin[1]) / cell).floor().max(0.0) as usize;
            let y1 = (((a[1].max(b[1]) + reach - origin[1]) / cell).floor() as usize).min(ny - 1);
            for cy in y0..=y1 {
                for cx in x0..=x1 {
                    cells[cy * nx + cx].push(i as u32);
                }
            }
        }
        Self {
            origin,
            cell,
            nx,
            ny,
            reach,
            cells,
        }
    }

    fn candidates(&self, p: [f64; 2]) -> Option<&[u32]> {
        let cx = ((p[0] - self.origin[0]) / self.cell).floor();
        let cy = ((p[1] - self.origin[1]) / self.cell).floor();
        if cx < 0.0 || cy < 0.0 || cx as usize >= self.nx || cy as usize >= self.ny {
            return None;
        }
        let list = &self.cells[cy as usize * self.nx + cx as usize];
        (!list.is_empty()).then_some(list.as_slice())
    }
}

impl Track {
    /// Closed Catmull-Rom spline through `waypoints`, resampled every `spacing` m.
    pub fn from_waypoints(waypoints: &[[f64; 2]], half_width: f64, spacing: f64) -> Result<Self> {
        let n = waypoints.len();
        if n < 4 {
            return Err(Error::Config("track needs at least 4 waypoints".into()));
        }
        if !(half_width > 0.0 && spacing > 0.0) {
            return Err(Error::Config("track half_width and spacing must be positive".into()));
        }
        let sub = 20;
        let mut dense = Vec::with_capacity(n * sub);
        for i in 0..n {
            let p0 = waypoints[(i + n - 1) % n];
            let p1 = waypoints[i];
            let p2 = waypoints[(i + 1) % n];
            let p3 = waypoints[(i + 2) % n];
            for k in 0..sub {
                let t = k as f64 / sub as f64;
                let (t2, t3) = (t * t, t * t * t);
                let f = |a: f64, b: f64, c: f64, d: f64| {
                    0.5 * (2.0 * b
                        + (-a + c) * t
                        + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2
                        + (-a + 3.0 * b - 3.0 * c + d) * t3)
                };
                dense.push([f(p0[0], p1[0], p2[0], p3[0]), f(p0[1], p1[1], p2[1], p3[1])]);
            }
        }
        let m = dense.len();
        let mut cum = vec![0.0; m + 1];
        for i in 0..m {
            let (a, b) = (dense[i], dense[(i + 1) % m]);
            cum[i + 1] = cum[i] + ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        }
        let length = cum[m];
        let count = (length / spacing).round().max(8.0) as usize;
        let ds = length / count as f64;
        let mut pts = Vec::with_capacity(count);
        let mut j = 0;
        for k in 0..count {
            let s = k as f64 * ds;
            while cum[j + 1] < s {
                j += 1;
            }
            let t = (s - cum[j]) / (cum[j + 1] - cum[j]).max(1e-12);
            let (a, b) = (dense[j], dense[(j + 1) % m]);
            pts.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
        let heading: Vec<f64> = (0..count)
            .map(|i| {
                let a = pts[(i + count - 1) % count];
                let b = pts[(i + 1) % count];
                (b[1] - a[1]).atan2(b[0] - a[0])
            })
            .collect();
        let raw: Vec<f64> = (0..count)
            .map(|i| {
                wrap_angle(heading[(i + 1) % count] - heading[(i + count - 1) % count]) / (2.0 * ds)
            })
            .collect();
        // Light smoothing over +-0.5 m.
        let half = (0.5 / ds).round() as usize;
        let curvature = (0..count)
            .map(|i| {
                let mut acc = 0.0;
                for k in 0..=2 * half {
                    acc += raw[(i + count + k - half) % count];
                }
                acc / (2 * half + 1) as f64
            })
            .collect();
        let index = SegmentGrid::build(&pts, 0.5, half_width + 1.0);
        Ok(Self {
            pts,
            heading,
            curvature,
            ds,
            length,
            half_width,
            index,
        })
    }

    /// Waypoints of the benchmark track: a dented oval of about 60 m.
    pub fn kidney_waypoints(count: usize) -> Vec<[f64; 2]> {
        let (r0, a, b) = (9.0, 0.25, 0.1);
        (0..count)
            .map(|k| {
                let phi = TAU * k as f64 / count as f64;
                let r = r0 * (1.0 + a * (2.0 * phi).cos() + b * phi.sin());
                [r * phi.cos(), r * phi.sin()]
            })
            .collect()
    }

    pub fn kidney() -> Self {
        Self::from_waypoints(&Self::kidney_waypoints(72), 1.5, 0.1).expect("benchmark track")
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn spacing(&self) -> f64 {
        self.ds
    }

    pub fn samples(&self) -> usize {
        self.pts.len()
    }

    fn index_at(&self, s: f64) -> (usize, f64) {
        let s = s.rem_euclid(self.length);
        let f = s / self.ds;
        let i = (f.floor() as usize).min(self.pts.len() - 1);
        (i, f - i as f64)
    }

    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let (i, t) = self.index_at(s);
        let a = self.pts[i];
        let b = self.pts[(i + 1) % self.pts.len()];
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        let (i, t) = self.index_at(s);
        let a = self.heading[i];
        let b = self.heading[(i + 1) % self.pts.len()];
        wrap_angle(a + t * wrap_angle(b - a))
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        let (i, t) = self.index_at(s);
        let a = self.curvature[i];
        let b = self.curvature[(i + 1) % self.pts.len()];
        a + t * (b - a)
    }

    pub fn max_abs_curvature(&self) -> f64 {
        self.curvature.iter().fold(0.0, |m, k| m.max(k.abs()))
    }

    fn project_segment(&self, i: usize, p: [f64; 2]) -> (f64, f64, f64) {
        let a = self.pts[i];
        let b = self.pts[(i + 1) % self.pts.len()];
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len2 = dx * dx + dy * dy;
        let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0);
        let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
        let (ex, ey) = (p[0] - qx, p[1] - qy);
        let dist2 = ex * ex + ey * ey;
        let cross = dx * ey - dy * ex;
        (dist2, t, cross.signum() * dist2.sqrt())
    }

    /// Projects `(x, y, psi)` onto the centerline.
    pub fn frame(&self, x: f64, y: f64, psi: f64) -> TrackFrame {
        let p = [x, y];
        let mut best = (f64::INFINITY, 0usize, 0.0, 0.0);
        let scan = |i: usize, best: &mut (f64, usize, f64, f64)| {
            let (d2, t, ey) = self.project_segment(i, p);
            if d2 < best.0 {
                *best = (d2, i, t, ey);
            }
        };
        // The grid is exact for points within `reach` of the centerline.
        let mut exact = false;
        if let Some(list) = self.index.candidates(p) {
            for &i in list {
                scan(i as usize, &mut best);
            }
            exact = best.0 <= self.index.reach * self.index.reach;
        }
        if !exact {
            for i in 0..self.pts.len() {
                scan(i, &mut best);
            }
        }
        let (_, i, t, e_y) = best;
        let s = ((i as f64 + t) * self.ds).rem_euclid(self.length);
        TrackFrame {
            s,
            e_y,
            e_psi: wrap_angle(psi - self.heading_at(s)),
            segment: i,
        }
    }

    pub fn frame_of(&self, state: &[f64]) -> TrackFrame {
        self.frame(state[PX], state[PY], state[PSI])
    }

    /// Signed progress between two arc-length readings, assuming less than
    /// half a lap in between.
    pub fn progress_delta(&self, s_old: f64, s_new: f64) -> f64 {
        let mut d = s_new - s_old;
        if d < -0.5 * self.length {
            d += self.length;
        } else if d > 0.5 * self.length {
            d -= self.length;
        }
        d
    }

    /// State at rest on the centerline at arc length `s`, moving at `speed`.
    pub fn start_state(&self, s: f64, speed: f64) -> [f64; 7] {
        let p = self.point_at(s);
        [p[0], p[1], self.heading_at(s), speed, 0.0, 0.0, 0.0]
    }
}

/// Speed target along the track from a lateral-grip limit plus acceleration
/// and braking limits.
#[derive(Clone, Debug)]
pub struct SpeedProfile {
    v: Vec<f64>,
    ds: f64,
    length: f64,
}

impl SpeedProfile {
    pub fn new(track: &Track, lateral_accel: f64, v_max: f64, accel: f64, brake: f64) -> Self {
        let n = track.samples();
        let ds = track.spacing();
        let mut v: Vec<f64> = (0..n)
            .map(|i| {
                let k = track.curvature[i].abs();
                if k > 1e-9 {
                    (lateral_accel / k).sqrt().min(v_max)
                } else {
                    v_max
                }
            })
            .collect();
        // Two laps of each pass settle the wrap-around.
        for _ in 0..2 {
            for k in (0..n).rev() {
                let next = v[(k + 1) % n];
                v[k] = v[k].min((next * next + 2.0 * brake * ds).sqrt());
            }
        }
        for _ in 0..2 {
            for k in 0..n {
                let prev = v[(k + n - 1) % n];
                v[k] = v[k].min((prev * prev + 2.0 * accel * ds).sqrt());
            }
        }
        Self {
            v,
            ds,
            length: track.length(),
        }
    }

    pub fn constant(track: &Track, speed: f64) -> Self {
        Self {
            v: vec![speed; track.samples()],
            ds: track.spacing(),
            length: track.length(),
        }
    }

    pub fn at(&self, s: f64) -> f64 {
        let f = s.rem_euclid(self.length) / self.ds;
        let i = (f.floor() as usize).min(self.v.len() - 1);
        let t = f - i as f64;
        self.v[i] + t * (self.v[(i + 1) % self.v.len()] - self.v[i])
    }

    pub fn min(&self) -> f64 {
        self.v.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Corridor `|e_y| <= limit` plus the steering-angle bound.
#[derive(Clone, Debug)]
pub struct TrackCorridor {
    pub track: std::sync::Arc<Track>,
    pub lateral_limit: f64,
    pub steer_max: f64,
}

impl StateSet for TrackCorridor {
    fn violation(&self, x: &[f64], margin: &[f64]) -> f64 {
        let f = self.track.frame_of(x);
        let mpos = if margin.len() > PY {
            margin[PX].hypot(margin[PY])
        } else {
            0.0
        };
        let msteer = margin.get(STEER).copied().unwrap_or(0.0);
        (f.e_y.abs() + mpos - self.lateral_limit).max(x[STEER].abs() + msteer - self.steer_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::compose_rate;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_state<R: Rng>(rng: &mut R) -> [f64; 7] {
        [
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-PI..PI),
            rng.gen_range(0.0..10.0),
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-0.4..0.4),
        ]
    }

    #[test]
    fn lip_identity_over_random_states() {
        let car = Car::default();
        let mut rng = crate::seeding::rng(42);
        for _ in 0..1000 {
            let x = random_state(&mut rng);
            let u = [rng.gen_range(0.0..14.0), rng.gen_range(-21.0..0.0), rng.gen_range(-3.0..3.0)];
            let mu = rng.gen_range(0.2..2.0);
            let mut native = [0.0; 7];
            let mut zero = [0.0; 7];
            let mut composed = [0.0; 7];
            let mut phi = [0.0; 7];
            car.rate(&x, &u, &[mu], &mut native);
            car.rate(&x, &u, &[0.0], &mut zero);
            compose_rate(&car, &x, &u, &[mu], &mut composed);
            car.regressor(&x, &u, &mut phi);
            for i in 0..7 {
                let scale = 1.0 + native[i].abs();
                assert!((native[i] - composed[i]).abs() <= 1e-10 * scale);
                assert!((native[i] - zero[i] - phi[i] * mu).abs() <= 1e-10 * scale);
            }
            assert_eq!(phi[PX], 0.0);
            assert_eq!(phi[PY], 0.0);
            assert_eq!(phi[PSI], 0.0);
            assert_eq!(phi[STEER], 0.0);
        }
    }

    #[test]
    fn straight_driving_has_no_lateral_force() {
        let car = Car::default();
        let x = [0.0, 0.0, 0.3, 5.0, 0.0, 0.0, 0.0];
        let (af, ar) = car.params.slip_angles(&x);
        assert_eq!(af, 0.0);
        assert_eq!(ar, 0.0);
        let mut phi = [1.0; 7];
        car.regressor(&x, &[0.0; 3], &mut phi);
        assert!(phi.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn doubling_friction_doubles_lateral_terms() {
        let car = Car::default();
        let x = [0.0, 0.0, 0.0, 4.0, 0.3, 0.5, 0.1];
        let u = [3.0, 0.0, 0.0];
        let r = |mu: f64| {
            let mut o = [0.0; 7];
            car.rate(&x, &u, &[mu], &mut o);
            o
        };
        let (r0, r1, r2) = (r(0.0), r(0.6), r(1.2));
        for i in [VX, VY, OMEGA] {
            assert_abs_diff_eq!(r2[i] - r0[i], 2.0 * (r1[i] - r0[i]), epsilon = 1e-12);
        }
        // Only the -2 F_yf sin(delta) term changes v_x.
        let (ff, _) = car.params.unit_lateral_forces(&x);
        assert_abs_diff_eq!(r1[VX] - r0[VX], -2.0 * 0.6 * ff * (0.1f64).sin() / 3.5, epsilon = 1e-12);
    }

    #[test]
    fn coasting_decelerates() {
        let car = Car::default();
        let mut x = [0.0, 0.0, 0.0, 6.0, 0.0, 0.0, 0.0];
        let mut r = [0.0; 7];
        car.rate(&x, &[0.0; 3], &[0.9], &mut r);
        assert!(r[VX] < 0.0);
        let mut energy = 0.5 * 3.5 * (x[VX] * x[VX] + x[VY] * x[VY]);
        for _ in 0..200 {
            crate::models::rk4_step(&car, &mut x, &[0.0; 3], &[1.3], &[0.0; 7], 0.02);
            let e = 0.5 * 3.5 * (x[VX] * x[VX] + x[VY] * x[VY]);
            assert!(e <= energy + 1e-12);
            energy = e;
        }
    }

    #[test]
    fn normal_loads_sum() {
        let p = CarParams {
            l_f: 0.12,
            l_r: 0.2,
            ..CarParams::default()
        };
        let (f, r) = p.normal_loads();
        assert_abs_diff_eq!(f + r, p.m * G / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn track_geometry() {
        let t = Track::kidney();
        assert!((t.length() - 60.0).abs() < 1.5, "length {}", t.length());
        assert!(1.0 / t.max_abs_curvature() > 5.0);
        // Point on the centerline.
        let s = 12.3;
        let p = t.point_at(s);
        let f = t.frame(p[0], p[1], t.heading_at(s));
        assert!(f.e_y.abs() < 1e-9);
        assert!((f.s - s).abs() < 1e-6);
        assert!(f.e_psi.abs() < 1e-9);
        // Symmetric offsets.
        let h = t.heading_at(s);
        let n = [-h.sin(), h.cos()];
        let l = t.frame(p[0] + 0.5 * n[0], p[1] + 0.5 * n[1], h);
        let r = t.frame(p[0] - 0.5 * n[0], p[1] - 0.5 * n[1], h);
        assert_abs_diff_eq!(l.e_y, 0.5, epsilon = 1e-3);
        assert_abs_diff_eq!(r.e_y, -0.5, epsilon = 1e-3);
        // Full lap wraps.
        let a = t.frame_of(&t.start_state(t.length() - 0.05, 1.0));
        let b = t.frame_of(&t.start_state(0.05, 1.0));
        assert_abs_diff_eq!(t.progress_delta(a.s, b.s), 0.1, epsilon = 1e-3);
        assert_abs_diff_eq!(t.point_at(t.length())[0], t.point_at(0.0)[0], epsilon = 1e-12);
    }

    #[test]
    fn indexed_projection_matches_brute_force() {
        let t = Track::kidney();
        let mut rng = crate::seeding::rng(3);
        for _ in 0..2000 {
            let s = rng.gen_range(0.0..t.length());
            let p = t.point_at(s);
            let off = rng.gen_range(-4.0..4.0);
            let h = t.heading_at(s);
            let (x, y) = (p[0] - off * h.sin(), p[1] + off * h.cos());
            let fast = t.frame(x, y, h);
            let brute = (0..t.samples())
                .map(|i| t.project_segment(i, [x, y]))
                .fold((f64::INFINITY, 0.0), |b, (d2, _, ey)| if d2 < b.0 { (d2, ey) } else { b });
            assert_abs_diff_eq!(fast.e_y, brute.1, epsilon = 1e-9);
        }
    }

    #[test]
    fn speed_profile_respects_grip() {
        let t = Track::kidney();
        let sp = SpeedProfile::new(&t, 0.9 * 0.9 * G, 10.0, 3.0, 4.0);
        for k in 0..600 {
            let s = k as f64 * 0.1;
            let v = sp.at(s);
            assert!(v <= 10.0 + 1e-9);
            assert!(v * v * t.curvature_at(s).abs() <= 0.81 * G * 1.001);
        }
        assert!(sp.min() > 5.0);
    }

    #[test]
    fn wrap() {
        assert_abs_diff_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-0.5), -0.5);
    }
}
