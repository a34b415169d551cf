//! Dense bounded-variable simplex tableau.
//!
//! Every row `i` carries a slack `s_i` with coefficient `+1` so that
//! `A x + s = b`; the sense of the row is encoded in the slack bounds
//! (`<=`: `[0, inf)`, `>=`: `(-inf, 0]`, `=`: `[0, 0]`). The slack block of
//! the tableau therefore always holds `B^-1`.

use super::{MilpModel, Sense};

const PIVOT_TOL: f64 = 1e-9;
const DUAL_TOL: f64 = 1e-9;
const PRIMAL_TOL: f64 = 1e-9;
const NONE: usize = usize::MAX;
/// Consecutive degenerate pivots before switching to Bland's rule.
const DEGENERATE_SWITCH: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stat {
    Basic,
    Lower,
    Upper,
    Free,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum LpOutcome {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

#[derive(Clone)]
pub(crate) struct Tableau {
    m: usize,
    ncols: usize,
    n_struct: usize,
    t: Vec<f64>,
    d: Vec<f64>,
    cost: Vec<f64>,
    pub(crate) lb: Vec<f64>,
    pub(crate) ub: Vec<f64>,
    pub(crate) x: Vec<f64>,
    stat: Vec<Stat>,
    basis: Vec<usize>,
    row_of: Vec<usize>,
    cols: Vec<Vec<(usize, f64)>>,
    b: Vec<f64>,
    /// Pivots performed since construction or the last snapshot restore.
    pub(crate) pivots: usize,
    pub(crate) iter_cap: usize,
    degenerate_run: usize,
}

impl Tableau {
    /// Builds the phase-1 tableau for the LP relaxation of `model`.
    pub(crate) fn new(model: &MilpModel) -> Self {
        let n = model.vars.len();
        let m = model.cons.len();
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n + m];
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
        let mut b = vec![0.0; m];
        let mut lb = Vec::with_capacity(n + m);
        let mut ub = Vec::with_capacity(n + m);
        let mut cost = Vec::with_capacity(n + m);
        for v in &model.vars {
            lb.push(v.lb);
            ub.push(v.ub);
            cost.push(v.obj);
        }
        for (i, c) in model.cons.iter().enumerate() {
            for &(j, a) in &c.terms {
                if a != 0.0 {
                    cols[j].push((i, a));
                    rows[i].push((j, a));
                }
            }
            cols[n + i].push((i, 1.0));
            b[i] = c.rhs;
            let (l, u) = match c.sense {
                Sense::Le => (0.0, f64::INFINITY),
                Sense::Ge => (f64::NEG_INFINITY, 0.0),
                Sense::Eq => (0.0, 0.0),
            };
            lb.push(l);
            ub.push(u);
            cost.push(0.0);
        }
        let mut x = vec![0.0; n + m];
        let mut stat = vec![Stat::Free; n + m];
        for j in 0..n {
            if lb[j].is_finite() {
                x[j] = lb[j];
                stat[j] = Stat::Lower;
            } else if ub[j].is_finite() {
                x[j] = ub[j];
                stat[j] = Stat::Upper;
            }
        }
        // Residual each slack must absorb with structurals at their start values.
        let mut resid = b.clone();
        for (i, row) in rows.iter().enumerate() {
            for &(j, a) in row {
                resid[i] -= a * x[j];
            }
        }
        let mut art_rows = Vec::new();
        for i in 0..m {
            let r = resid[i];
            if r < lb[n + i] - PRIMAL_TOL || r > ub[n + i] + PRIMAL_TOL {
                art_rows.push((i, if r > 0.0 { 1.0 } else { -1.0 }));
            }
        }
        let k = art_rows.len();
        let ncols = n + m + k;
        let mut t = vec![0.0; m * ncols];
        let mut basis = vec![NONE; m];
        let mut row_of = vec![NONE; ncols];
        let mut art_of_row = vec![NONE; m];
        for (a, &(i, sigma)) in art_rows.iter().enumerate() {
            art_of_row[i] = a;
            cols.push(vec![(i, sigma)]);
            lb.push(0.0);
            ub.push(f64::INFINITY);
            cost.push(0.0);
            x.push(resid[i].abs());
            stat.push(Stat::Basic);
        }
        for i in 0..m {
            let sigma = if art_of_row[i] == NONE { 1.0 } else { art_rows[art_of_row[i]].1 };
            let row = &mut t[i * ncols..(i + 1) * ncols];
            for &(j, a) in &rows[i] {
                row[j] += sigma * a;
            }
            row[n + i] = sigma;
            if art_of_row[i] == NONE {
                basis[i] = n + i;
                x[n + i] = resid[i];
                stat[n + i] = Stat::Basic;
            } else {
                let col = n + m + art_of_row[i];
                row[col] = 1.0;
                basis[i] = col;
                // The slack sits at its only finite bound, which is 0 for every sense.
                x[n + i] = 0.0;
                stat[n + i] = if lb[n + i].is_finite() { Stat::Lower } else { Stat::Upper };
            }
            row_of[basis[i]] = i;
        }
        let iter_cap = 10 * (m + n + m).max(1) + 100;
        Tableau {
            m,
            ncols,
            n_struct: n,
            t,
            d: vec![0.0; ncols],
            cost,
            lb,
            ub,
            x,
            stat,
            basis,
            row_of,
            cols,
            b,
            pivots: 0,
            iter_cap,
            degenerate_run: 0,
        }
    }

    fn n_art(&self) -> usize {
        self.ncols - self.n_struct - self.m
    }

    #[inline]
    fn at(&self, r: usize, j: usize) -> f64 {
        self.t[r * self.ncols + j]
    }

    /// Recomputes reduced costs for the cost vector `c`.
    fn price(&mut self, c: &[f64]) {
        let n = self.n_struct;
        let mut y = vec![0.0; self.m];
        for r in 0..self.m {
            let cb = c[self.basis[r]];
            if cb != 0.0 {
                let row = &self.t[r * self.ncols + n..r * self.ncols + n + self.m];
                for (yi, &binv) in y.iter_mut().zip(row) {
                    *yi += cb * binv;
                }
            }
        }
        for j in 0..self.ncols {
            if self.stat[j] == Stat::Basic {
                self.d[j] = 0.0;
            } else {
                let mut dj = c[j];
                for &(i, a) in &self.cols[j] {
                    dj -= y[i] * a;
                }
                self.d[j] = dj;
            }
        }
    }

    /// Recomputes basic values from the nonbasic ones through `B^-1`.
    pub(crate) fn refresh_primal(&mut self) {
        let n = self.n_struct;
        let mut rhs = self.b.clone();
        for j in 0..self.ncols {
            if self.stat[j] != Stat::Basic && self.x[j] != 0.0 {
                for &(i, a) in &self.cols[j] {
                    rhs[i] -= a * self.x[j];
                }
            }
        }
        for r in 0..self.m {
            let row = &self.t[r * self.ncols + n..r * self.ncols + n + self.m];
            let v: f64 = row.iter().zip(&rhs).map(|(a, b)| a * b).sum();
            self.x[self.basis[r]] = v;
        }
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let nc = self.ncols;
        let p = self.t[r * nc + j];
        let inv = 1.0 / p;
        let mut nz = Vec::with_capacity(nc / 4);
        {
            let row = &mut self.t[r * nc..(r + 1) * nc];
            for (k, v) in row.iter_mut().enumerate() {
                if *v != 0.0 {
                    *v *= inv;
                    if v.abs() < 1e-14 {
                        *v = 0.0;
                    } else {
                        nz.push(k);
                    }
                }
            }
            row[j] = 1.0;
        }
        let (before, rest) = self.t.split_at_mut(r * nc);
        let (prow, after) = rest.split_at_mut(nc);
        for row in before.chunks_exact_mut(nc).chain(after.chunks_exact_mut(nc)) {
            let f = row[j];
            if f != 0.0 {
                for &k in &nz {
                    let v = row[k] - f * prow[k];
                    row[k] = if v.abs() < 1e-13 { 0.0 } else { v };
                }
                row[j] = 0.0;
            }
        }
        let f = self.d[j];
        if f != 0.0 {
            for &k in &nz {
                self.d[k] -= f * prow[k];
            }
        }
        self.d[j] = 0.0;
        let leaving = self.basis[r];
        self.row_of[leaving] = NONE;
        self.basis[r] = j;
        self.row_of[j] = r;
        self.stat[j] = Stat::Basic;
        self.pivots += 1;
    }

    /// Primal simplex on the current reduced costs `self.d` w.r.t. `c`.
    fn primal(&mut self, c: &[f64]) -> LpOutcome {
        let mut iters = 0;
        self.degenerate_run = 0;
        loop {
            if iters >= self.iter_cap {
                return LpOutcome::IterationLimit;
            }
            iters += 1;
            if iters % 200 == 0 {
                self.refresh_primal();
                self.price(c);
            }
            let bland = self.degenerate_run > DEGENERATE_SWITCH;
            let mut enter = NONE;
            let mut dir = 0.0;
            let mut best = 0.0;
            for j in 0..self.ncols {
                let s = self.stat[j];
                if s == Stat::Basic || self.lb[j] == self.ub[j] {
                    continue;
                }
                let dj = self.d[j];
                let dj_dir = match s {
                    Stat::Lower if dj < -DUAL_TOL => 1.0,
                    Stat::Upper if dj > DUAL_TOL => -1.0,
                    Stat::Free if dj.abs() > DUAL_TOL => -dj.signum(),
                    _ => continue,
                };
                if bland {
                    enter = j;
                    dir = dj_dir;
                    break;
                }
                if dj.abs() > best {
                    best = dj.abs();
                    enter = j;
                    dir = dj_dir;
                }
            }
            if enter == NONE {
                return LpOutcome::Optimal;
            }
            let j = enter;
            let mut theta = self.ub[j] - self.lb[j];
            if !theta.is_finite() {
                theta = f64::INFINITY;
            }
            let mut leave = NONE;
            let mut leave_to_upper = false;
            let mut leave_alpha = 0.0;
            for r in 0..self.m {
                let alpha = self.at(r, j) * dir;
                if alpha.abs() < PIVOT_TOL {
                    continue;
                }
                let bi = self.basis[r];
                let (ratio, to_upper) = if alpha > 0.0 {
                    if !self.lb[bi].is_finite() {
                        continue;
                    }
                    ((self.x[bi] - self.lb[bi]) / alpha, false)
                } else {
                    if !self.ub[bi].is_finite() {
                        continue;
                    }
                    ((self.ub[bi] - self.x[bi]) / -alpha, true)
                };
                let ratio = ratio.max(0.0);
                let better = if ratio < theta - 1e-12 {
                    true
                } else if ratio <= theta + 1e-12 && leave != NONE {
                    if bland {
                        bi < self.basis[leave]
                    } else {
                        alpha.abs() > leave_alpha
                    }
                } else {
                    false
                };
                if better {
                    theta = ratio;
                    leave = r;
                    leave_to_upper = to_upper;
                    leave_alpha = alpha.abs();
                }
            }
            if !theta.is_finite() {
                return LpOutcome::Unbounded;
            }
            if theta < 1e-12 {
                self.degenerate_run += 1;
            } else {
                self.degenerate_run = 0;
            }
            if theta > 0.0 {
                for r in 0..self.m {
                    let a = self.at(r, j);
                    if a != 0.0 {
                        self.x[self.basis[r]] -= theta * dir * a;
                    }
                }
                self.x[j] += dir * theta;
            }
            if leave == NONE {
                if dir > 0.0 {
                    self.x[j] = self.ub[j];
                    self.stat[j] = Stat::Upper;
                } else {
                    self.x[j] = self.lb[j];
                    self.stat[j] = Stat::Lower;
                }
            } else {
                let bi = self.basis[leave];
                self.pivot(leave, j);
                if leave_to_upper {
                    self.x[bi] = self.ub[bi];
                    self.stat[bi] = Stat::Upper;
                } else {
                    self.x[bi] = self.lb[bi];
                    self.stat[bi] = Stat::Lower;
                }
            }
        }
    }

    /// Two-phase solve from the construction basis.
    pub(crate) fn solve(&mut self) -> LpOutcome {
        let n = self.n_struct;
        let m = self.m;
        let k = self.n_art();
        if k > 0 {
            let mut c1 = vec![0.0; self.ncols];
            for c in c1.iter_mut().skip(n + m) {
                *c = 1.0;
            }
            self.price(&c1);
            match self.primal(&c1) {
                LpOutcome::Optimal => {}
                LpOutcome::Unbounded => unreachable!("phase 1 is bounded below"),
                other => return other,
            }
            self.refresh_primal();
            let infeas: f64 = (n + m..self.ncols).map(|j| self.x[j].max(0.0)).sum();
            let scale = 1.0 + self.b.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            if infeas > 1e-7 * scale {
                return LpOutcome::Infeasible;
            }
            // Drive zero-valued artificials out of the basis where possible.
            for j in n + m..self.ncols {
                let r = self.row_of[j];
                if r == NONE {
                    continue;
                }
                let mut best = NONE;
                let mut best_abs = 1e-7;
                for q in 0..n + m {
                    if self.stat[q] != Stat::Basic && self.at(r, q).abs() > best_abs {
                        best_abs = self.at(r, q).abs();
                        best = q;
                    }
                }
                if best != NONE {
                    self.pivot(r, best);
                    self.stat[j] = Stat::Lower;
                    self.x[j] = 0.0;
                }
            }
            for j in n + m..self.ncols {
                self.lb[j] = 0.0;
                self.ub[j] = 0.0;
                if self.stat[j] != Stat::Basic {
                    self.x[j] = 0.0;
                    self.stat[j] = Stat::Lower;
                }
            }
            self.refresh_primal();
        }
        let c = self.cost.clone();
        self.price(&c);
        let out = self.primal(&c);
        if out == LpOutcome::Optimal {
            self.refresh_primal();
        }
        out
    }

    /// Replaces bounds of the listed columns, keeping the basis dual feasible.
    pub(crate) fn set_bounds(&mut self, vars: &[usize], lbs: &[f64], ubs: &[f64]) {
        for ((&j, &l), &u) in vars.iter().zip(lbs).zip(ubs) {
            self.lb[j] = l;
            self.ub[j] = u;
            if self.stat[j] != Stat::Basic {
                let dj = self.d[j];
                let s = if l == u {
                    Stat::Lower
                } else if dj > DUAL_TOL {
                    Stat::Lower
                } else if dj < -DUAL_TOL {
                    Stat::Upper
                } else {
                    self.stat[j]
                };
                let (s, v) = match s {
                    Stat::Upper if u.is_finite() => (Stat::Upper, u),
                    _ if l.is_finite() => (Stat::Lower, l),
                    _ if u.is_finite() => (Stat::Upper, u),
                    _ => (Stat::Free, 0.0),
                };
                self.stat[j] = s;
                self.x[j] = v;
            }
        }
        self.refresh_primal();
    }

    /// Dual simplex followed by a primal clean-up pass.
    pub(crate) fn reoptimize(&mut self) -> LpOutcome {
        let mut iters = 0;
        loop {
            if iters >= self.iter_cap {
                return LpOutcome::IterationLimit;
            }
            iters += 1;
            if iters % 200 == 0 {
                self.refresh_primal();
            }
            let mut leave = NONE;
            let mut worst = PRIMAL_TOL * 10.0;
            let mut to_upper = false;
            for r in 0..self.m {
                let bi = self.basis[r];
                let v = self.x[bi];
                if self.lb[bi] - v > worst {
                    worst = self.lb[bi] - v;
                    leave = r;
                    to_upper = false;
                } else if v - self.ub[bi] > worst {
                    worst = v - self.ub[bi];
                    leave = r;
                    to_upper = true;
                }
            }
            if leave == NONE {
                break;
            }
            let r = leave;
            let bi = self.basis[r];
            let bound = if to_upper { self.ub[bi] } else { self.lb[bi] };
            let mut enter = NONE;
            let mut best_ratio = f64::INFINITY;
            let mut best_abs = 0.0;
            for j in 0..self.ncols {
                let s = self.stat[j];
                if s == Stat::Basic || self.lb[j] == self.ub[j] {
                    continue;
                }
                let a = self.at(r, j);
                if a.abs() < PIVOT_TOL {
                    continue;
                }
                // Increasing x_bi needs a < 0 for a rising nonbasic, a > 0 for a falling one.
                let ok = match (s, to_upper) {
                    (Stat::Lower, false) => a < 0.0,
                    (Stat::Upper, false) => a > 0.0,
                    (Stat::Lower, true) => a > 0.0,
                    (Stat::Upper, true) => a < 0.0,
                    _ => true,
                };
                if !ok {
                    continue;
                }
                let ratio = self.d[j].abs() / a.abs();
                if ratio < best_ratio - 1e-12
                    || (ratio <= best_ratio + 1e-12 && a.abs() > best_abs)
                {
                    best_ratio = ratio;
                    best_abs = a.abs();
                    enter = j;
                }
            }
            if enter == NONE {
                return LpOutcome::Infeasible;
            }
            let j = enter;
            let delta = (self.x[bi] - bound) / self.at(r, j);
            for q in 0..self.m {
                let a = self.at(q, j);
                if a != 0.0 {
                    self.x[self.basis[q]] -= a * delta;
                }
            }
            self.x[j] += delta;
            self.pivot(r, j);
            self.x[bi] = bound;
            self.stat[bi] = if to_upper { Stat::Upper } else { Stat::Lower };
        }
        self.refresh_primal();
        let c = self.cost.clone();
        let out = self.primal(&c);
        if out == LpOutcome::Optimal {
            self.refresh_primal();
        }
        out
    }

    /// Structural values clamped into their bounds.
    pub(crate) fn structural(&self) -> Vec<f64> {
        (0..self.n_struct).map(|j| self.x[j].clamp(self.lb[j], self.ub[j])).collect()
    }

    /// Row duals `y` with `d = c - A^T y`.
    pub(crate) fn duals(&self) -> Vec<f64> {
        (0..self.m).map(|i| -self.d[self.n_struct + i]).collect()
    }
}
