//! Exact arc-based SS, TS and OS models with MTZ subtour elimination. Sized
//! for oracle use on a handful of retailers.

use serde::{Deserialize, Serialize};

use super::{IrpProblem, IrpSolution, SolveStatus};
use crate::error::{Error, Result};
use crate::milp::{add_pospart_linearization, LinExpr, MilpModel, MilpSolution, Sense, Status, VarId};
use crate::model::Plan;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Formulation {
    Ss,
    Ts,
    Os(usize),
}

/// Inventory bookkeeping of one scenario evaluated on one branch.
#[derive(Clone, Debug)]
pub struct ScenarioBlock {
    pub scenario: usize,
    pub branch: usize,
    /// `Î_{t+1}` per `[t][i]` as an affine expression of the deliveries.
    pub exprs: Vec<Vec<LinExpr>>,
    /// `(plus, minus)` parts of `exprs`.
    pub parts: Vec<Vec<(VarId, VarId)>>,
}

#[derive(Clone, Debug)]
pub struct ExactModel {
    pub model: MilpModel,
    pub formulation: Formulation,
    /// Directed node pairs; node 0 is the warehouse and retailer `i` is node `i + 1`.
    pub arcs: Vec<(usize, usize)>,
    /// `z[branch][t][v][arc]`.
    pub z: Vec<Vec<Vec<Vec<VarId>>>>,
    /// `u[branch][t][v][i]`.
    pub u: Vec<Vec<Vec<Vec<VarId>>>>,
    /// MTZ position `o[branch][t][v][i]` in `[1, N]`.
    pub order: Vec<Vec<Vec<Vec<VarId>>>>,
    pub blocks: Vec<ScenarioBlock>,
    /// Shared first-period deliveries `ū[v][i]` (TS only).
    pub ubar: Vec<Vec<VarId>>,
    /// Shared first-period arcs `z̄[v][arc]` (TS only).
    pub zbar: Vec<Vec<VarId>>,
}

/// Single-stage model: one plan for every scenario.
pub fn build_ss(problem: &IrpProblem) -> ExactModel {
    let all: Vec<usize> = (0..problem.scenarios.len()).collect();
    build(problem, Formulation::Ss, vec![all], false)
}

/// Two-stage model: one plan per scenario, linked in period 0.
pub fn build_ts(problem: &IrpProblem) -> ExactModel {
    let branches = (0..problem.scenarios.len()).map(|w| vec![w]).collect();
    build(problem, Formulation::Ts, branches, true)
}

/// One-scenario model of scenario `w` at probability one.
pub fn build_os(problem: &IrpProblem, w: usize) -> ExactModel {
    let single = problem.single(w);
    let mut m = build(&single, Formulation::Os(w), vec![vec![0]], false);
    for b in &mut m.blocks {
        b.scenario = w;
    }
    m
}

fn build(problem: &IrpProblem, formulation: Formulation, branches: Vec<Vec<usize>>, linked: bool) -> ExactModel {
    let inst = &problem.inst;
    let n = problem.n();
    let nv = inst.n_vehicles;
    let l = problem.lookahead();
    let cost = inst.edge_costs();
    let big_m = problem.big_m();
    let probs = &problem.scenarios.probabilities;
    let arcs: Vec<(usize, usize)> =
        (0..=n).flat_map(|a| (0..=n).filter(move |&b| b != a).map(move |b| (a, b))).collect();

    let mut model = MilpModel::new();
    let mut z = Vec::new();
    let mut u = Vec::new();
    let mut order = Vec::new();
    let mut blocks = Vec::new();

    for (b, served) in branches.iter().enumerate() {
        // Transport is paid once per branch, weighted by the mass it serves.
        let weight: f64 = served.iter().map(|&w| probs[w]).sum();
        let mut zb = Vec::with_capacity(l);
        let mut ub = Vec::with_capacity(l);
        let mut ob = Vec::with_capacity(l);
        for t in 0..l {
            let mut zt = Vec::with_capacity(nv);
            let mut ut = Vec::with_capacity(nv);
            let mut ot = Vec::with_capacity(nv);
            for v in 0..nv {
                let za: Vec<VarId> = arcs
                    .iter()
                    .map(|&(i, j)| model.binary(format!("z_b{b}_t{t}_v{v}_{i}_{j}"), weight * cost.get(i, j)))
                    .collect();
                let uv: Vec<VarId> =
                    (0..n).map(|i| model.continuous(format!("u_b{b}_t{t}_v{v}_{i}"), 0.0, big_m, 0.0)).collect();
                let ov: Vec<VarId> =
                    (0..n).map(|i| model.continuous(format!("o_b{b}_t{t}_v{v}_{i}"), 1.0, n as f64, 0.0)).collect();

                let out_of = |k: usize| -> LinExpr {
                    let mut e = LinExpr::new();
                    for (a, &(i, _)) in arcs.iter().enumerate() {
                        if i == k {
                            e.add(za[a], 1.0);
                        }
                    }
                    e
                };
                let into = |k: usize| -> LinExpr {
                    let mut e = LinExpr::new();
                    for (a, &(_, j)) in arcs.iter().enumerate() {
                        if j == k {
                            e.add(za[a], 1.0);
                        }
                    }
                    e
                };
                // Depot: leave and return at most once.
                model.add_con(format!("depot_out_b{b}_t{t}_v{v}"), out_of(0), Sense::Le, 1.0);
                let mut bal = out_of(0);
                for (var, c) in into(0).terms {
                    bal.add(var, -c);
                }
                model.add_con(format!("depot_flow_b{b}_t{t}_v{v}"), bal, Sense::Eq, 0.0);
                for i in 0..n {
                    let k = i + 1;
                    let mut bal = out_of(k);
                    for (var, c) in into(k).terms {
                        bal.add(var, -c);
                    }
                    model.add_con(format!("flow_b{b}_t{t}_v{v}_{i}"), bal, Sense::Eq, 0.0);
                    let mut link = LinExpr::new().term(uv[i], 1.0);
                    for (var, c) in out_of(k).terms {
                        link.add(var, -big_m * c);
                    }
                    model.add_con(format!("visit_link_b{b}_t{t}_v{v}_{i}"), link, Sense::Le, 0.0);
                }
                let mut load = LinExpr::new();
                for &var in &uv {
                    load.add(var, 1.0);
                }
                model.add_con(format!("vcap_b{b}_t{t}_v{v}"), load, Sense::Le, inst.vehicle_capacity);
                // o_j >= o_i + 1 - N (1 - z_ij) between retailers.
                for (a, &(i, j)) in arcs.iter().enumerate() {
                    if i > 0 && j > 0 {
                        let e = LinExpr::new().term(ov[i - 1], 1.0).term(ov[j - 1], -1.0).term(za[a], n as f64);
                        model.add_con(format!("mtz_b{b}_t{t}_v{v}_{i}_{j}"), e, Sense::Le, n as f64 - 1.0);
                    }
                }
                zt.push(za);
                ut.push(uv);
                ot.push(ov);
            }
            for i in 0..n {
                let mut once = LinExpr::new();
                for za in &zt {
                    for (a, &(p, _)) in arcs.iter().enumerate() {
                        if p == i + 1 {
                            once.add(za[a], 1.0);
                        }
                    }
                }
                model.add_con(format!("visit_once_b{b}_t{t}_{i}"), once, Sense::Le, 1.0);
            }
            zb.push(zt);
            ub.push(ut);
            ob.push(ot);
        }

        for &w in served {
            let scen = &problem.scenarios.scenarios[w];
            let p = probs[w];
            let mut exprs = Vec::with_capacity(l);
            let mut parts = Vec::with_capacity(l);
            let mut level: Vec<LinExpr> = problem.inventories.iter().map(|&x| LinExpr::constant(x)).collect();
            for t in 0..l {
                let mut et = Vec::with_capacity(n);
                let mut pt = Vec::with_capacity(n);
                for i in 0..n {
                    for v in 0..nv {
                        // u^{iv}_t + Î^i_t <= I^max
                        let mut cap = level[i].clone();
                        cap.add(ub[t][v][i], 1.0);
                        let rhs = inst.inv_capacity - cap.constant;
                        cap.constant = 0.0;
                        model.add_con(format!("icap_b{b}_w{w}_t{t}_v{v}_{i}"), cap, Sense::Le, rhs);
                    }
                    let mut next = level[i].clone();
                    for v in 0..nv {
                        next.add(ub[t][v][i], 1.0);
                    }
                    next.add_constant(-scen[i][t]);
                    pt.push(add_pospart_linearization(
                        &mut model,
                        &next,
                        p * inst.holding_cost,
                        p * inst.backorder_cost,
                    ));
                    et.push(next.clone());
                    level[i] = next;
                }
                exprs.push(et);
                parts.push(pt);
            }
            blocks.push(ScenarioBlock { scenario: w, branch: b, exprs, parts });
        }
        z.push(zb);
        u.push(ub);
        order.push(ob);
    }

    let mut ubar = Vec::new();
    let mut zbar = Vec::new();
    if linked {
        for v in 0..nv {
            let uv: Vec<VarId> = (0..n).map(|i| model.continuous(format!("ubar_v{v}_{i}"), 0.0, big_m, 0.0)).collect();
            let zv: Vec<VarId> =
                arcs.iter().map(|&(i, j)| model.binary(format!("zbar_v{v}_{i}_{j}"), 0.0)).collect();
            for b in 0..branches.len() {
                for i in 0..n {
                    let e = LinExpr::new().term(u[b][0][v][i], 1.0).term(uv[i], -1.0);
                    model.add_con(format!("nau_b{b}_v{v}_{i}"), e, Sense::Eq, 0.0);
                }
                for a in 0..arcs.len() {
                    let e = LinExpr::new().term(z[b][0][v][a], 1.0).term(zv[a], -1.0);
                    model.add_con(format!("naz_b{b}_v{v}_{a}"), e, Sense::Eq, 0.0);
                }
            }
            ubar.push(uv);
            zbar.push(zv);
        }
    }

    ExactModel { model, formulation, arcs, z, u, order, blocks, ubar, zbar }
}

impl ExactModel {
    pub fn n_branches(&self) -> usize {
        self.z.len()
    }

    /// Reads routes and deliveries out of a solver point.
    pub fn decode(&self, x: &[f64]) -> Vec<Vec<Plan>> {
        let n = self.u.first().and_then(|b| b.first()).and_then(|t| t.first()).map_or(0, Vec::len);
        self.z
            .iter()
            .zip(&self.u)
            .map(|(zb, ub)| {
                zb.iter()
                    .zip(ub)
                    .map(|(zt, ut)| {
                        let routes = zt.iter().map(|za| self.follow(za, x, n)).collect();
                        let deliveries =
                            (0..n).map(|i| ut.iter().map(|uv| x[uv[i]].max(0.0)).sum::<f64>()).collect();
                        Plan { routes, deliveries }
                    })
                    .collect()
            })
            .collect()
    }

    /// Walks the depot tour selected by `za` in `x`.
    fn follow(&self, za: &[VarId], x: &[f64], n: usize) -> Vec<usize> {
        let next = |from: usize| {
            self.arcs.iter().enumerate().find(|&(a, &(i, _))| i == from && x[za[a]] > 0.5).map(|(_, &(_, j))| j)
        };
        let mut route = Vec::new();
        let mut cur = 0;
        while let Some(j) = next(cur) {
            if j == 0 || route.len() > n {
                break;
            }
            route.push(j - 1);
            cur = j;
        }
        route
    }

    /// Fills the auxiliary inventory split and consensus variables of a point
    /// whose arc, delivery and order variables are set.
    pub fn complete(&self, x: &mut [f64]) {
        for block in &self.blocks {
            for (et, pt) in block.exprs.iter().zip(&block.parts) {
                for (e, &(plus, minus)) in et.iter().zip(pt) {
                    let val = e.eval(x);
                    x[plus] = val.max(0.0);
                    x[minus] = (-val).max(0.0);
                }
            }
        }
        for (v, uv) in self.ubar.iter().enumerate() {
            for (i, &var) in uv.iter().enumerate() {
                x[var] = x[self.u[0][0][v][i]];
            }
        }
        for (v, zv) in self.zbar.iter().enumerate() {
            for (a, &var) in zv.iter().enumerate() {
                x[var] = x[self.z[0][0][v][a]];
            }
        }
    }

    /// Converts a solver result into a solution with recomputed costs.
    pub fn solution(&self, problem: &IrpProblem, sol: &MilpSolution) -> Result<IrpSolution> {
        if !sol.has_solution() {
            return Err(Error::Infeasible(format!("exact model returned {:?}", sol.status)));
        }
        let status = match sol.status {
            Status::Optimal => SolveStatus::Optimal,
            Status::TimeLimit => SolveStatus::TimeLimit,
            _ => SolveStatus::Feasible,
        };
        let plans = self.decode(&sol.x);
        let sub = match self.formulation {
            Formulation::Os(w) => problem.single(w),
            _ => problem.clone(),
        };
        let mut out = IrpSolution::from_plans(&sub, plans, status);
        out.model_objective = Some(sol.objective);
        Ok(out)
    }
}

/// Maps an SS solver point onto the TS model by replicating the plan in every
/// scenario branch.
pub fn embed_ss_in_ts(ss: &ExactModel, x_ss: &[f64], ts: &ExactModel) -> Vec<f64> {
    let mut x = vec![0.0; ts.model.n_vars()];
    for b in 0..ts.n_branches() {
        for (t, (zt, ut)) in ts.z[b].iter().zip(&ts.u[b]).enumerate() {
            for v in 0..zt.len() {
                for (a, &var) in zt[v].iter().enumerate() {
                    x[var] = x_ss[ss.z[0][t][v][a]];
                }
                for (i, &var) in ut[v].iter().enumerate() {
                    x[var] = x_ss[ss.u[0][t][v][i]];
                    x[ts.order[b][t][v][i]] = x_ss[ss.order[0][t][v][i]];
                }
            }
        }
    }
    ts.complete(&mut x);
    x
}
