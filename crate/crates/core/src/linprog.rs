//! Small dense linear programs solved by a two-phase tableau simplex.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

const TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-10;
const MAX_ITERS: usize = 50_000;

/// `min c^T x` subject to `A_ub x <= b_ub`, `A_eq x = b_eq`, `lo <= x <= hi`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProgram {
    pub c: DVector<f64>,
    pub a_ub: DMatrix<f64>,
    pub b_ub: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl LinearProgram {
    /// No rows and the default bounds `x >= 0`.
    pub fn new(c: DVector<f64>) -> Self {
        let q = c.len();
        Self {
            a_ub: DMatrix::zeros(0, q),
            b_ub: DVector::zeros(0),
            a_eq: DMatrix::zeros(0, q),
            b_eq: DVector::zeros(0),
            lo: DVector::zeros(q),
            hi: DVector::from_element(q, f64::INFINITY),
            c,
        }
    }

    pub fn with_bounds(mut self, lo: DVector<f64>, hi: DVector<f64>) -> Self {
        self.lo = lo;
        self.hi = hi;
        self
    }

    pub fn with_ub(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_ub = a;
        self.b_ub = b;
        self
    }

    pub fn with_eq(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    fn validate(&self) -> Result<()> {
        let q = self.c.len();
        check_dim("A_ub columns", q, self.a_ub.ncols())?;
        check_dim("b_ub", self.a_ub.nrows(), self.b_ub.len())?;
        check_dim("A_eq columns", q, self.a_eq.ncols())?;
        check_dim("b_eq", self.a_eq.nrows(), self.b_eq.len())?;
        check_dim("lo", q, self.lo.len())?;
        check_dim("hi", q, self.hi.len())?;
        let finite = self.c.iter().all(|v| v.is_finite())
            && self.a_ub.iter().all(|v| v.is_finite())
            && self.b_ub.iter().all(|v| v.is_finite())
            && self.a_eq.iter().all(|v| v.is_finite())
            && self.b_eq.iter().all(|v| v.is_finite());
        if !finite || self.lo.iter().chain(self.hi.iter()).any(|v| v.is_nan()) {
            return Err(Error::Contract("linear program has non-finite data".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LpOutcome {
    Optimal { x: DVector<f64>, value: f64 },
    Infeasible,
    Unbounded,
}

impl LpOutcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            LpOutcome::Optimal { value, .. } => Some(*value),
            _ => None,
        }
    }
}

/// How an original variable is written in terms of non-negative columns.
struct VarMap {
    offset: f64,
    cols: [(usize, f64); 2],
    ncols: usize,
}

enum RowKind {
    Le,
    Eq,
}

pub fn solve_lp(lp: &LinearProgram) -> Result<LpOutcome> {
    lp.validate()?;
    let q = lp.c.len();

    // Shift and split variables so every column is >= 0.
    let mut maps = Vec::with_capacity(q);
    let mut ncol = 0;
    let mut box_rows: Vec<(usize, f64)> = Vec::new();
    for j in 0..q {
        let (lo, hi) = (lp.lo[j], lp.hi[j]);
        if lo > hi {
            return Ok(LpOutcome::Infeasible);
        }
        let map = match (lo.is_finite(), hi.is_finite()) {
            (true, _) => {
                if hi.is_finite() {
                    box_rows.push((ncol, hi - lo));
                }
                VarMap {
                    offset: lo,
                    cols: [(ncol, 1.0), (0, 0.0)],
                    ncols: 1,
                }
            }
            (false, true) => VarMap {
                offset: hi,
                cols: [(ncol, -1.0), (0, 0.0)],
                ncols: 1,
            },
            (false, false) => VarMap {
                offset: 0.0,
                cols: [(ncol, 1.0), (ncol + 1, -1.0)],
                ncols: 2,
            },
        };
        ncol += map.ncols;
        maps.push(map);
    }
    let nstruct = ncol;

    let mut rows: Vec<(Vec<f64>, f64, RowKind)> = Vec::new();
    let push_row = |a: &[f64], b: f64, kind: RowKind, rows: &mut Vec<_>| {
        let mut coef = vec![0.0; nstruct];
        let mut rhs = b;
        for (j, map) in maps.iter().enumerate() {
            let aj = a[j];
            if aj == 0.0 {
                continue;
            }
            rhs -= aj * map.offset;
            for &(col, sign) in &map.cols[..map.ncols] {
                coef[col] += aj * sign;
            }
        }
        rows.push((coef, rhs, kind));
    };
    for r in 0..lp.a_ub.nrows() {
        let a: Vec<f64> = lp.a_ub.row(r).iter().copied().collect();
        push_row(&a, lp.b_ub[r], RowKind::Le, &mut rows);
    }
    for r in 0..lp.a_eq.nrows() {
        let a: Vec<f64> = lp.a_eq.row(r).iter().copied().collect();
        push_row(&a, lp.b_eq[r], RowKind::Eq, &mut rows);
    }
    for &(col, width) in &box_rows {
        let mut coef = vec![0.0; nstruct];
        coef[col] = 1.0;
        rows.push((coef, width, RowKind::Le));
    }

    let mut cost = vec![0.0; nstruct];
    for (j, map) in maps.iter().enumerate() {
        for &(col, sign) in &map.cols[..map.ncols] {
            cost[col] += lp.c[j] * sign;
        }
    }

    let outcome = match Tableau::build(&rows, nstruct).solve(&cost)? {
        Phase::Optimal(y) => y,
        Phase::Infeasible => return Ok(LpOutcome::Infeasible),
        Phase::Unbounded => return Ok(LpOutcome::Unbounded),
    };
    let x = DVector::from_iterator(
        q,
        maps.iter().map(|m| {
            m.offset
                + m.cols[..m.ncols]
                    .iter()
                    .map(|&(col, sign)| sign * outcome[col])
                    .sum::<f64>()
        }),
    );
    let value = lp.c.dot(&x);
    Ok(LpOutcome::Optimal { x, value })
}

enum Phase {
    Optimal(Vec<f64>),
    Infeasible,
    Unbounded,
}

/// Dense tableau `rows x (cols + 1)`, right-hand side in the last column.
struct Tableau {
    t: Vec<f64>,
    rows: usize,
    cols: usize,
    basis: Vec<usize>,
    /// First artificial column; columns at or past it are artificial.
    art_start: usize,
}

impl Tableau {
    fn build(rows: &[(Vec<f64>, f64, RowKind)], nstruct: usize) -> Self {
        let nslack = rows.iter().filter(|r| matches!(r.2, RowKind::Le)).count();
        let mut needs_art = Vec::with_capacity(rows.len());
        for (_, b, kind) in rows {
            needs_art.push(!(matches!(kind, RowKind::Le) && *b >= 0.0));
        }
        let nart = needs_art.iter().filter(|&&a| a).count();
        let art_start = nstruct + nslack;
        let cols = art_start + nart;
        let width = cols + 1;
        let mut t = vec![0.0; rows.len() * width];
        let mut basis = vec![0; rows.len()];
        let (mut slack, mut art) = (nstruct, art_start);
        for (r, (coef, b, kind)) in rows.iter().enumerate() {
            let sign = if *b < 0.0 { -1.0 } else { 1.0 };
            let row = &mut t[r * width..(r + 1) * width];
            for (j, v) in coef.iter().enumerate() {
                row[j] = sign * v;
            }
            row[cols] = sign * b;
            if matches!(kind, RowKind::Le) {
                row[slack] = sign;
                if !needs_art[r] {
                    basis[r] = slack;
                }
                slack += 1;
            }
            if needs_art[r] {
                row[art] = 1.0;
                basis[r] = art;
                art += 1;
            }
        }
        Self {
            t,
            rows: rows.len(),
            cols,
            basis,
            art_start,
        }
    }

    fn width(&self) -> usize {
        self.cols + 1
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.t[r * self.width() + c]
    }

    fn pivot(&mut self, pr: usize, pc: usize, obj: &mut [f64]) {
        let w = self.width();
        let p = self.t[pr * w + pc];
        for v in &mut self.t[pr * w..(pr + 1) * w] {
            *v /= p;
        }
        let (before, rest) = self.t.split_at_mut(pr * w);
        let (prow, after) = rest.split_at_mut(w);
        for row in before.chunks_mut(w).chain(after.chunks_mut(w)) {
            let f = row[pc];
            if f != 0.0 {
                for (v, pv) in row.iter_mut().zip(prow.iter()) {
                    *v -= f * pv;
                }
                row[pc] = 0.0;
            }
        }
        let f = obj[pc];
        if f != 0.0 {
            for (v, pv) in obj.iter_mut().zip(prow.iter()) {
                *v -= f * pv;
            }
            obj[pc] = 0.0;
        }
        self.basis[pr] = pc;
    }

    /// Reduced costs for column costs `cost` given the current basis.
    fn reduced(&self, cost: &[f64]) -> Vec<f64> {
        let w = self.width();
        let mut obj = vec![0.0; w];
        obj[..cost.len()].copy_from_slice(cost);
        for r in 0..self.rows {
            let cb = cost.get(self.basis[r]).copied().unwrap_or(0.0);
            if cb != 0.0 {
                for c in 0..w {
                    obj[c] -= cb * self.at(r, c);
                }
            }
        }
        obj
    }

    /// Primal simplex on `obj` (reduced costs, last entry = -value).
    fn iterate(&mut self, obj: &mut [f64], allowed: usize) -> Result<bool> {
        let mut degenerate = 0usize;
        for _ in 0..MAX_ITERS {
            let bland = degenerate > 50;
            let mut enter = None;
            let mut best = -TOL;
            for c in 0..allowed {
                if obj[c] < best {
                    enter = Some(c);
                    if bland {
                        break;
                    }
                    best = obj[c];
                }
            }
            let Some(pc) = enter else {
                return Ok(true);
            };
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..self.rows {
                let a = self.at(r, pc);
                if a > PIVOT_TOL {
                    let ratio = self.at(r, self.cols) / a;
                    leave = match leave {
                        None => Some((r, ratio)),
                        Some((lr, lratio)) => {
                            if ratio < lratio - 1e-12
                                || (ratio <= lratio + 1e-12 && self.basis[r] < self.basis[lr])
                            {
                                Some((r, ratio))
                            } else {
                                Some((lr, lratio))
                            }
                        }
                    };
                }
            }
            let Some((pr, ratio)) = leave else {
                return Ok(false);
            };
            if ratio <= 1e-12 {
                degenerate += 1;
            } else {
                degenerate = 0;
            }
            self.pivot(pr, pc, obj);
        }
        Err(Error::Contract("simplex iteration limit reached".into()))
    }

    fn solve(mut self, cost: &[f64]) -> Result<Phase> {
        let w = self.width();
        if self.art_start < self.cols {
            let mut c1 = vec![0.0; self.cols];
            for v in &mut c1[self.art_start..] {
                *v = 1.0;
            }
            let mut obj = self.reduced(&c1);
            self.iterate(&mut obj, self.cols)?;
            let scale = 1.0
                + (0..self.rows)
                    .map(|r| self.at(r, self.cols).abs())
                    .fold(0.0, f64::max);
            if -obj[self.cols] > 1e-8 * scale {
                return Ok(Phase::Infeasible);
            }
            // Pivot zero-level artificials out; drop rows that are redundant.
            let mut r = 0;
            while r < self.rows {
                if self.basis[r] >= self.art_start {
                    let pc = (0..self.art_start).find(|&c| self.at(r, c).abs() > 1e-9);
                    match pc {
                        Some(pc) => {
                            self.pivot(r, pc, &mut obj);
                        }
                        None => {
                            self.t.drain(r * w..(r + 1) * w);
                            self.basis.remove(r);
                            self.rows -= 1;
                            continue;
                        }
                    }
                }
                r += 1;
            }
        }
        let mut c2 = vec![0.0; self.cols];
        c2[..cost.len()].copy_from_slice(cost);
        let mut obj = self.reduced(&c2);
        if !self.iterate(&mut obj, self.art_start)? {
            return Ok(Phase::Unbounded);
        }
        let mut y = vec![0.0; self.cols];
        for r in 0..self.rows {
            y[self.basis[r]] = self.at(r, self.cols).max(0.0);
        }
        Ok(Phase::Optimal(y))
    }
}

/// Minimum-norm-1 solution of `A^T lambda = d`.
#[derive(Clone, Debug, PartialEq)]
pub struct L1Preimage {
    pub lambda: DVector<f64>,
    pub l1: f64,
}

/// `min |lambda|_1 s.t. A^T lambda = d`; `None` when `d` is outside the row
/// space of `A`.
pub fn min_l1_preimage(a: &DMatrix<f64>, d: &DVector<f64>) -> Result<Option<L1Preimage>> {
    let (rows, p) = a.shape();
    check_dim("direction", p, d.len())?;
    if d.amax() == 0.0 {
        return Err(Error::Contract("direction must be non-zero".into()));
    }
    let mut aeq = DMatrix::zeros(p, 2 * rows);
    for i in 0..rows {
        for j in 0..p {
            aeq[(j, i)] = a[(i, j)];
            aeq[(j, rows + i)] = -a[(i, j)];
        }
    }
    let lp = LinearProgram::new(DVector::from_element(2 * rows, 1.0)).with_eq(aeq, d.clone());
    match solve_lp(&lp)? {
        LpOutcome::Optimal { x, value } => {
            let lambda = DVector::from_iterator(rows, (0..rows).map(|i| x[i] - x[rows + i]));
            Ok(Some(L1Preimage { lambda, l1: value }))
        }
        LpOutcome::Infeasible => Ok(None),
        LpOutcome::Unbounded => Err(Error::Contract("l1 preimage cannot be unbounded".into())),
    }
}
