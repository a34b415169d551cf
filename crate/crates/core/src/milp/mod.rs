//! Mixed-integer linear programs: a model builder, a dense two-phase simplex
//! for the LP relaxation, best-first branch-and-bound, and an enumeration
//! oracle used in tests.
//!
//! Every model is a minimisation. Returned assignments are re-checked against
//! all bounds and rows to [`FEAS_TOL`].

mod bnb;
mod simplex;

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use bnb::solve_milp;

use simplex::{LpOutcome, Tableau};

pub const FEAS_TOL: f64 = 1e-6;
pub const INT_TOL: f64 = 1e-6;
pub const DEFAULT_GAP: f64 = 1e-6;

pub type VarId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarKind {
    Continuous,
    Binary,
    Integer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Le,
    Eq,
    Ge,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variable {
    pub name: String,
    pub kind: VarKind,
    pub lb: f64,
    pub ub: f64,
    pub obj: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Constraint {
    pub name: String,
    pub terms: Vec<(VarId, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

/// A linear expression `sum coef * var + constant`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(VarId, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        LinExpr { terms: Vec::new(), constant: c }
    }

    pub fn term(mut self, v: VarId, c: f64) -> Self {
        self.terms.push((v, c));
        self
    }

    pub fn add(&mut self, v: VarId, c: f64) {
        self.terms.push((v, c));
    }

    pub fn add_constant(&mut self, c: f64) {
        self.constant += c;
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(v, c)| c * x[v]).sum::<f64>()
    }
}

#[derive(Clone, Debug)]
pub struct MilpModel {
    pub vars: Vec<Variable>,
    pub cons: Vec<Constraint>,
    /// Constant added to every objective value.
    pub obj_offset: f64,
    pub warm_start: Option<Vec<f64>>,
    pub time_limit: Option<Duration>,
    /// Branch-and-bound node budget; unlike the time limit it keeps runs reproducible.
    pub node_limit: Option<usize>,
    pub gap_tol: f64,
}

impl Default for MilpModel {
    fn default() -> Self {
        MilpModel {
            vars: Vec::new(),
            cons: Vec::new(),
            obj_offset: 0.0,
            warm_start: None,
            time_limit: None,
            node_limit: None,
            gap_tol: DEFAULT_GAP,
        }
    }
}

impl MilpModel {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a variable; binaries are clipped to `[0, 1]` and integer bounds
    /// must be finite.
    pub fn add_var(&mut self, name: impl Into<String>, kind: VarKind, lb: f64, ub: f64, obj: f64) -> VarId {
        let (lb, ub) = match kind {
            VarKind::Binary => (lb.max(0.0), ub.min(1.0)),
            VarKind::Integer => (lb.ceil(), ub.floor()),
            VarKind::Continuous => (lb, ub),
        };
        assert!(
            kind == VarKind::Continuous || (lb.is_finite() && ub.is_finite()),
            "integer variable bounds must be finite"
        );
        assert!(lb <= ub, "empty domain for variable");
        self.vars.push(Variable { name: name.into(), kind, lb, ub, obj });
        self.vars.len() - 1
    }

    pub fn binary(&mut self, name: impl Into<String>, obj: f64) -> VarId {
        self.add_var(name, VarKind::Binary, 0.0, 1.0, obj)
    }

    pub fn continuous(&mut self, name: impl Into<String>, lb: f64, ub: f64, obj: f64) -> VarId {
        self.add_var(name, VarKind::Continuous, lb, ub, obj)
    }

    /// Adds `expr sense rhs`; the expression constant moves to the right side
    /// and repeated variables are merged.
    pub fn add_con(&mut self, name: impl Into<String>, expr: LinExpr, sense: Sense, rhs: f64) -> usize {
        let mut terms = expr.terms;
        terms.sort_by_key(|t| t.0);
        let mut merged: Vec<(VarId, f64)> = Vec::with_capacity(terms.len());
        for (v, c) in terms {
            match merged.last_mut() {
                Some(last) if last.0 == v => last.1 += c,
                _ => merged.push((v, c)),
            }
        }
        merged.retain(|t| t.1 != 0.0);
        self.cons.push(Constraint { name: name.into(), terms: merged, sense, rhs: rhs - expr.constant });
        self.cons.len() - 1
    }

    pub fn add_obj(&mut self, v: VarId, c: f64) {
        self.vars[v].obj += c;
    }

    pub fn add_obj_expr(&mut self, expr: &LinExpr, weight: f64) {
        for &(v, c) in &expr.terms {
            self.vars[v].obj += weight * c;
        }
        self.obj_offset += weight * expr.constant;
    }

    pub fn set_bounds(&mut self, v: VarId, lb: f64, ub: f64) {
        self.vars[v].lb = lb;
        self.vars[v].ub = ub;
    }

    pub fn n_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn n_integer(&self) -> usize {
        self.vars.iter().filter(|v| v.kind != VarKind::Continuous).count()
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.obj_offset + self.vars.iter().zip(x).map(|(v, &xi)| v.obj * xi).sum::<f64>()
    }

    /// Largest bound or row violation of `x`, ignoring integrality.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for (v, &xi) in self.vars.iter().zip(x) {
            worst = worst.max(v.lb - xi).max(xi - v.ub);
        }
        for c in &self.cons {
            let lhs: f64 = c.terms.iter().map(|&(v, a)| a * x[v]).sum();
            let r = lhs - c.rhs;
            worst = worst.max(match c.sense {
                Sense::Le => r,
                Sense::Ge => -r,
                Sense::Eq => r.abs(),
            });
        }
        worst
    }

    pub fn max_integrality_violation(&self, x: &[f64]) -> f64 {
        self.vars
            .iter()
            .zip(x)
            .filter(|(v, _)| v.kind != VarKind::Continuous)
            .map(|(_, &xi)| (xi - xi.round()).abs())
            .fold(0.0, f64::max)
    }

    /// True if `x` satisfies every bound, row and integrality requirement.
    pub fn is_feasible(&self, x: &[f64]) -> bool {
        x.len() == self.vars.len()
            && self.max_violation(x) <= FEAS_TOL
            && self.max_integrality_violation(x) <= INT_TOL
    }

    /// Copy with integer variables fixed at the rounded values of `x`.
    pub(crate) fn with_integers_fixed(&self, x: &[f64]) -> MilpModel {
        let mut m = self.clone();
        for (v, &xi) in m.vars.iter_mut().zip(x) {
            if v.kind != VarKind::Continuous {
                let r = xi.round().clamp(v.lb, v.ub);
                v.lb = r;
                v.ub = r;
            }
        }
        m.warm_start = None;
        m
    }

    /// Human-readable LP-format dump.
    pub fn to_lp_string(&self) -> String {
        let name = |j: usize| {
            let n = &self.vars[j].name;
            if n.is_empty() { format!("x{j}") } else { n.replace(|c: char| !c.is_ascii_alphanumeric() && c != '_', "_") }
        };
        let fmt_terms = |terms: &mut dyn Iterator<Item = (usize, f64)>| {
            let mut s = String::new();
            for (j, c) in terms {
                if c == 0.0 {
                    continue;
                }
                let _ = write!(s, " {} {} {}", if c < 0.0 { "-" } else { "+" }, c.abs(), name(j));
            }
            if s.is_empty() { " 0".to_string() } else { s }
        };
        let mut out = String::from("\\ generated by scpo\nMinimize\n obj:");
        out += &fmt_terms(&mut self.vars.iter().enumerate().map(|(j, v)| (j, v.obj)));
        if self.obj_offset != 0.0 {
            let _ = write!(out, " + {}", self.obj_offset);
        }
        out += "\nSubject To\n";
        for (i, c) in self.cons.iter().enumerate() {
            let op = match c.sense {
                Sense::Le => "<=",
                Sense::Ge => ">=",
                Sense::Eq => "=",
            };
            let label = if c.name.is_empty() { format!("c{i}") } else { c.name.replace(|ch: char| !ch.is_ascii_alphanumeric() && ch != '_', "_") };
            let _ = writeln!(out, " {label}:{} {op} {}", fmt_terms(&mut c.terms.iter().copied()), c.rhs);
        }
        out += "Bounds\n";
        for (j, v) in self.vars.iter().enumerate() {
            let lo = if v.lb.is_finite() { v.lb.to_string() } else { "-inf".into() };
            let hi = if v.ub.is_finite() { v.ub.to_string() } else { "+inf".into() };
            let _ = writeln!(out, " {lo} <= {} <= {hi}", name(j));
        }
        let ints: Vec<String> = (0..self.vars.len()).filter(|&j| self.vars[j].kind == VarKind::Integer).map(name).collect();
        let bins: Vec<String> = (0..self.vars.len()).filter(|&j| self.vars[j].kind == VarKind::Binary).map(name).collect();
        if !ints.is_empty() {
            let _ = writeln!(out, "General\n {}", ints.join(" "));
        }
        if !bins.is_empty() {
            let _ = writeln!(out, "Binary\n {}", bins.join(" "));
        }
        out + "End\n"
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Status {
    Optimal,
    Feasible { gap: f64 },
    Infeasible,
    Unbounded,
    /// Time or node budget exhausted before any incumbent was found.
    TimeLimit,
    /// The simplex iteration cap was hit; see `MilpSolution::diagnostic`.
    IterationLimit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MilpSolution {
    pub status: Status,
    pub x: Vec<f64>,
    pub objective: f64,
    pub bound: f64,
    pub solve_time: f64,
    pub nodes: usize,
    /// Row duals of an LP solve (`d = c - A^T y`).
    pub duals: Option<Vec<f64>>,
    pub diagnostic: Option<String>,
}

impl MilpSolution {
    pub(crate) fn without_solution(status: Status, started: Instant) -> Self {
        MilpSolution {
            status,
            x: Vec::new(),
            objective: f64::INFINITY,
            bound: f64::NEG_INFINITY,
            solve_time: started.elapsed().as_secs_f64(),
            nodes: 0,
            duals: None,
            diagnostic: None,
        }
    }

    pub fn has_solution(&self) -> bool {
        matches!(self.status, Status::Optimal | Status::Feasible { .. })
    }

    pub fn value(&self, v: VarId) -> f64 {
        self.x[v]
    }

    pub fn gap(&self) -> f64 {
        relative_gap(self.objective, self.bound)
    }
}

pub(crate) fn relative_gap(incumbent: f64, bound: f64) -> f64 {
    if !incumbent.is_finite() || !bound.is_finite() {
        return f64::INFINITY;
    }
    ((incumbent - bound) / incumbent.abs().max(1.0)).max(0.0)
}

/// Solves the LP relaxation of `model`.
pub fn solve_lp(model: &MilpModel) -> MilpSolution {
    let started = Instant::now();
    let mut tab = Tableau::new(model);
    let out = tab.solve();
    lp_solution(model, &tab, out, started)
}

fn lp_solution(model: &MilpModel, tab: &Tableau, out: LpOutcome, started: Instant) -> MilpSolution {
    match out {
        LpOutcome::Optimal => {
            let x = tab.structural();
            let objective = model.objective_value(&x);
            let viol = model.max_violation(&x);
            let mut sol = MilpSolution {
                status: Status::Optimal,
                objective,
                bound: objective,
                x,
                solve_time: started.elapsed().as_secs_f64(),
                nodes: 0,
                duals: Some(tab.duals()),
                diagnostic: None,
            };
            if viol > FEAS_TOL {
                sol.diagnostic = Some(format!("LP residual {viol:.3e} after refactorisation"));
            }
            sol
        }
        LpOutcome::Infeasible => MilpSolution::without_solution(Status::Infeasible, started),
        LpOutcome::Unbounded => {
            let mut s = MilpSolution::without_solution(Status::Unbounded, started);
            s.objective = f64::NEG_INFINITY;
            s
        }
        LpOutcome::IterationLimit => {
            let mut s = MilpSolution::without_solution(Status::IterationLimit, started);
            s.diagnostic = Some(format!(
                "simplex exceeded {} iterations on {} rows x {} columns",
                tab.iter_cap,
                model.cons.len(),
                model.vars.len()
            ));
            s
        }
    }
}

/// Solves the LP with integer variables fixed at the rounding of `x`; returns
/// a verified feasible assignment if one exists.
pub(crate) fn polish(model: &MilpModel, x: &[f64]) -> Option<Vec<f64>> {
    let fixed = model.with_integers_fixed(x);
    let sol = solve_lp(&fixed);
    if sol.status != Status::Optimal {
        return None;
    }
    let mut y = sol.x;
    for (v, yi) in model.vars.iter().zip(y.iter_mut()) {
        if v.kind != VarKind::Continuous {
            *yi = yi.round();
        }
    }
    model.is_feasible(&y).then_some(y)
}

/// Exhaustive oracle: enumerates every integer pattern and solves the LP in
/// the continuous variables. Intended for at most a dozen small-range
/// integer variables.
pub fn brute_force(model: &MilpModel) -> MilpSolution {
    let started = Instant::now();
    let ints: Vec<VarId> =
        (0..model.vars.len()).filter(|&j| model.vars[j].kind != VarKind::Continuous).collect();
    let ranges: Vec<(i64, i64)> =
        ints.iter().map(|&j| (model.vars[j].lb as i64, model.vars[j].ub as i64)).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut unbounded = false;
    let mut cur: Vec<i64> = ranges.iter().map(|r| r.0).collect();
    let mut patterns = 0usize;
    'outer: loop {
        patterns += 1;
        let mut fixed = model.clone();
        fixed.warm_start = None;
        for (k, &j) in ints.iter().enumerate() {
            fixed.vars[j].lb = cur[k] as f64;
            fixed.vars[j].ub = cur[k] as f64;
        }
        let sol = solve_lp(&fixed);
        match sol.status {
            Status::Optimal if best.as_ref().map_or(true, |b| sol.objective < b.0) => {
                best = Some((sol.objective, sol.x));
            }
            Status::Unbounded => unbounded = true,
            _ => {}
        }
        for k in 0..ints.len() {
            if cur[k] < ranges[k].1 {
                cur[k] += 1;
                continue 'outer;
            }
            cur[k] = ranges[k].0;
        }
        break;
    }
    let mut sol = match (unbounded, best) {
        (true, _) => {
            let mut s = MilpSolution::without_solution(Status::Unbounded, started);
            s.objective = f64::NEG_INFINITY;
            s
        }
        (false, None) => MilpSolution::without_solution(Status::Infeasible, started),
        (false, Some((obj, x))) => MilpSolution {
            status: Status::Optimal,
            x,
            objective: obj,
            bound: obj,
            solve_time: 0.0,
            nodes: patterns,
            duals: None,
            diagnostic: None,
        },
    };
    sol.solve_time = started.elapsed().as_secs_f64();
    sol
}

/// Adds `mu - nu = expr`, `mu, nu >= 0` and `weight * (mu + nu)` to the
/// objective. Returns `(mu, nu)`.
pub fn add_abs_linearization(model: &mut MilpModel, expr: &LinExpr, weight: f64) -> (VarId, VarId) {
    let k = model.vars.len();
    let mu = model.continuous(format!("mu{k}"), 0.0, f64::INFINITY, weight);
    let nu = model.continuous(format!("nu{k}"), 0.0, f64::INFINITY, weight);
    let mut row = LinExpr::new().term(mu, 1.0).term(nu, -1.0);
    for &(v, c) in &expr.terms {
        row.add(v, -c);
    }
    model.add_con(format!("abs{k}"), row, Sense::Eq, expr.constant);
    (mu, nu)
}

/// Adds `plus - minus = inv_expr`, `plus, minus >= 0` and
/// `h * plus + e * minus` to the objective. Returns `(plus, minus)`.
pub fn add_pospart_linearization(
    model: &mut MilpModel,
    inv_expr: &LinExpr,
    h: f64,
    e: f64,
) -> (VarId, VarId) {
    let k = model.vars.len();
    let plus = model.continuous(format!("ip{k}"), 0.0, f64::INFINITY, h);
    let minus = model.continuous(format!("im{k}"), 0.0, f64::INFINITY, e);
    let mut row = LinExpr::new().term(plus, 1.0).term(minus, -1.0);
    for &(v, c) in &inv_expr.terms {
        row.add(v, -c);
    }
    model.add_con(format!("pos{k}"), row, Sense::Eq, inv_expr.constant);
    (plus, minus)
}

#[cfg(test)]
mod tests;
