//! Best-first branch-and-bound over the simplex tableau.
//!
//! Any optimal tableau is dual feasible for every bound box that only
//! tightens integer variables inside their root domains, so each node is
//! re-optimised by dual simplex from whatever tableau is current. A clean copy
//! of the root tableau is restored after long pivot runs to limit drift.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use super::simplex::{LpOutcome, Tableau};
use super::{polish, relative_gap, MilpModel, MilpSolution, Status, VarKind, INT_TOL};

const RESTORE_AFTER_PIVOTS: usize = 4000;
const DIVE_EVERY: usize = 30;

struct Node {
    bound: f64,
    depth: usize,
    seq: usize,
    lbs: Vec<f64>,
    ubs: Vec<f64>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // Max-heap order: smallest bound first, then deepest, then oldest.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then(self.depth.cmp(&other.depth))
            .then(other.seq.cmp(&self.seq))
    }
}

struct Search<'a> {
    model: &'a MilpModel,
    ints: Vec<usize>,
    tab: Tableau,
    root: Tableau,
    incumbent: Option<(f64, Vec<f64>)>,
    numerical_trouble: bool,
}

impl Search<'_> {
    fn cutoff(&self) -> f64 {
        match &self.incumbent {
            Some((obj, _)) => obj - self.model.gap_tol * obj.abs().max(1.0),
            None => f64::INFINITY,
        }
    }

    fn offer(&mut self, x: &[f64]) {
        let mut y = x.to_vec();
        for &j in &self.ints {
            y[j] = y[j].round();
        }
        let y = if self.model.is_feasible(&y) {
            Some(y)
        } else {
            polish(self.model, &y)
        };
        if let Some(y) = y {
            let obj = self.model.objective_value(&y);
            if self.incumbent.as_ref().map_or(true, |(o, _)| obj < *o - 1e-12) {
                log::trace!("milp: incumbent {obj}");
                self.incumbent = Some((obj, y));
            }
        }
    }

    /// Re-optimises the LP under the given integer bounds.
    fn solve_node(&mut self, lbs: &[f64], ubs: &[f64]) -> Option<(f64, Vec<f64>)> {
        if self.tab.pivots > RESTORE_AFTER_PIVOTS {
            self.tab = self.root.clone();
        }
        self.tab.set_bounds(&self.ints, lbs, ubs);
        let mut out = self.tab.reoptimize();
        if out == LpOutcome::IterationLimit {
            self.tab = self.root.clone();
            self.tab.set_bounds(&self.ints, lbs, ubs);
            out = self.tab.reoptimize();
        }
        match out {
            LpOutcome::Optimal => {
                let x = self.tab.structural();
                // A drifted tableau can report a point outside the node box; retry cleanly.
                if self.model.max_violation_with(&x, &self.ints, lbs, ubs) > 1e-5 {
                    self.tab = self.root.clone();
                    self.tab.set_bounds(&self.ints, lbs, ubs);
                    if self.tab.reoptimize() != LpOutcome::Optimal {
                        self.numerical_trouble = true;
                        return None;
                    }
                    let x = self.tab.structural();
                    return Some((self.model.objective_value(&x), x));
                }
                Some((self.model.objective_value(&x), x))
            }
            LpOutcome::Infeasible => None,
            _ => {
                self.numerical_trouble = true;
                None
            }
        }
    }

    fn branch_var(&self, x: &[f64]) -> Option<usize> {
        let mut best = None;
        let mut best_score = INT_TOL;
        for (k, &j) in self.ints.iter().enumerate() {
            let f = x[j] - x[j].floor();
            let score = f.min(1.0 - f);
            if score > best_score {
                best_score = score;
                best = Some(k);
            }
        }
        best
    }

    /// Fixes near-integral variables one at a time until the LP point is
    /// integral or the dive fails.
    fn dive(&mut self, lbs: &[f64], ubs: &[f64], x: &[f64]) {
        let mut lbs = lbs.to_vec();
        let mut ubs = ubs.to_vec();
        let mut x = x.to_vec();
        for _ in 0..self.ints.len() {
            let mut pick = None;
            let mut closest = f64::INFINITY;
            for (k, &j) in self.ints.iter().enumerate() {
                let dist = (x[j] - x[j].round()).abs();
                if dist > INT_TOL && dist < closest {
                    closest = dist;
                    pick = Some(k);
                }
            }
            let Some(k) = pick else {
                self.offer(&x);
                return;
            };
            let v = x[self.ints[k]].round().clamp(lbs[k], ubs[k]);
            lbs[k] = v;
            ubs[k] = v;
            match self.solve_node(&lbs, &ubs) {
                Some((obj, y)) if obj < self.cutoff() => x = y,
                _ => return,
            }
        }
    }
}

impl MilpModel {
    fn max_violation_with(&self, x: &[f64], ints: &[usize], lbs: &[f64], ubs: &[f64]) -> f64 {
        let mut worst = self.max_violation(x);
        for ((&j, &l), &u) in ints.iter().zip(lbs).zip(ubs) {
            worst = worst.max(l - x[j]).max(x[j] - u);
        }
        worst
    }
}

/// Best-first branch-and-bound on the most fractional variable.
pub fn solve_milp(model: &MilpModel) -> MilpSolution {
    let started = Instant::now();
    let ints: Vec<usize> =
        (0..model.vars.len()).filter(|&j| model.vars[j].kind != VarKind::Continuous).collect();
    let mut tab = Tableau::new(model);
    let out = tab.solve();
    if out != LpOutcome::Optimal {
        let mut sol = super::lp_solution(model, &tab, out, started);
        sol.duals = None;
        sol.nodes = 1;
        return sol;
    }
    tab.pivots = 0;
    let root = tab.clone();
    let mut search = Search { model, ints, tab, root, incumbent: None, numerical_trouble: false };
    if let Some(ws) = &model.warm_start {
        if ws.len() == model.vars.len() {
            search.offer(ws);
        }
    }

    let root_lbs: Vec<f64> = search.ints.iter().map(|&j| model.vars[j].lb).collect();
    let root_ubs: Vec<f64> = search.ints.iter().map(|&j| model.vars[j].ub).collect();
    let root_x = search.tab.structural();
    let root_obj = model.objective_value(&root_x);
    let mut heap = BinaryHeap::new();
    heap.push(Node { bound: root_obj, depth: 0, seq: 0, lbs: root_lbs, ubs: root_ubs });
    let mut seq = 1;
    let mut nodes = 0usize;
    let mut limit_hit = false;
    let mut open_bound = f64::INFINITY;
    // The root node reuses the solved tableau.
    let mut cached_root = Some((root_obj, root_x));

    while let Some(node) = heap.pop() {
        if cached_root.is_none() && node.bound >= search.cutoff() {
            continue;
        }
        let over_time = model.time_limit.is_some_and(|t| started.elapsed() >= t);
        let over_nodes = model.node_limit.is_some_and(|n| nodes >= n);
        if over_time || over_nodes {
            limit_hit = true;
            open_bound = node.bound;
            heap.push(node);
            break;
        }
        nodes += 1;
        let solved = match cached_root.take() {
            Some(r) => Some(r),
            None => search.solve_node(&node.lbs, &node.ubs),
        };
        let Some((obj, x)) = solved else { continue };
        if obj >= search.cutoff() {
            continue;
        }
        let Some(k) = search.branch_var(&x) else {
            search.offer(&x);
            continue;
        };
        if nodes == 1 || nodes % DIVE_EVERY == 0 {
            search.dive(&node.lbs, &node.ubs, &x);
            if obj >= search.cutoff() {
                continue;
            }
        }
        let v = x[search.ints[k]];
        let mut down_ubs = node.ubs.clone();
        down_ubs[k] = v.floor();
        let mut up_lbs = node.lbs.clone();
        up_lbs[k] = v.ceil();
        heap.push(Node { bound: obj, depth: node.depth + 1, seq, lbs: node.lbs.clone(), ubs: down_ubs });
        heap.push(Node { bound: obj, depth: node.depth + 1, seq: seq + 1, lbs: up_lbs, ubs: node.ubs });
        seq += 2;
    }

    let solve_time = started.elapsed().as_secs_f64();
    let remaining = heap.iter().map(|n| n.bound).fold(open_bound, f64::min);
    let mut sol = match search.incumbent {
        None => {
            let status = if limit_hit { Status::TimeLimit } else { Status::Infeasible };
            let mut s = MilpSolution::without_solution(status, started);
            s.bound = if limit_hit { remaining } else { f64::INFINITY };
            s
        }
        Some((obj, x)) => {
            let bound = if limit_hit { remaining.min(obj) } else { obj };
            let gap = relative_gap(obj, bound);
            let status = if gap <= model.gap_tol && !search.numerical_trouble {
                Status::Optimal
            } else {
                Status::Feasible { gap }
            };
            MilpSolution { status, x, objective: obj, bound, solve_time, nodes, duals: None, diagnostic: None }
        }
    };
    sol.nodes = nodes;
    if search.numerical_trouble {
        sol.diagnostic = Some("some nodes were skipped after simplex failures".into());
    }
    sol
}
