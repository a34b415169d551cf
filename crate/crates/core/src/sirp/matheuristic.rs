//! Three-MILP matheuristic.
//!
//! Step 1 orders all retailers by a giant TSP tour. MILP1 then chooses
//! visits and aggregate deliveries on the acyclic arc set compatible with that
//! order. The visited sets are split into vehicle tours (TSP or CVRP), MILP2
//! inserts and removes retailers against those tours, and MILP3 re-optimises
//! deliveries with every route's visiting order fixed. Each route is
//! re-sequenced after MILP2 and MILP3.
//!
//! Expected inventory cost is modelled on the cumulative delivery `D^i_t`:
//! `E_w[h (I0 + D - C^w_t)^+ + e (I0 + D - C^w_t)^-]` is convex piecewise
//! linear in `D` with breakpoints `C^w_t - I0`, so one set of segment
//! variables per `(i, t)` replaces the per-scenario inventory variables.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{canonical_routes, node, retsp, vehicle_loads, IrpProblem, IrpSolution, SolveStatus};
use crate::milp::{add_abs_linearization, solve_milp, LinExpr, MilpModel, MilpSolution, Sense, VarId, VarKind};
use crate::model::{DistMatrix, Plan};
use crate::routing::{cvrp_solve, insertion_cost, removal_gain, tsp_solve};

const TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatheuristicConfig {
    /// Branch-and-bound node cap per MILP; keeps results independent of
    /// machine speed.
    pub node_limit: usize,
    /// Wall-clock cap per MILP in seconds.
    pub time_limit: Option<f64>,
    pub gap_tol: f64,
}

impl Default for MatheuristicConfig {
    fn default() -> Self {
        MatheuristicConfig { node_limit: 2000, time_limit: Some(10.0), gap_tol: 1e-4 }
    }
}

/// Consensus penalty `sum lambda |u_0 - target|` on period-0 deliveries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Penalty {
    /// Per retailer and vehicle, `[i][v]`.
    pub lambda: Vec<Vec<f64>>,
    /// Vehicle-aggregated multipliers used by MILP1, `[i]`.
    pub lambda_agg: Vec<f64>,
    /// Consensus deliveries `ū[i][v]`.
    pub target: Vec<Vec<f64>>,
}

impl Penalty {
    /// Per-vehicle penalty of a period-0 plan.
    pub fn value(&self, plan: &Plan) -> f64 {
        let nv = self.target.first().map_or(0, Vec::len);
        let u = vehicle_loads(plan, self.target.len(), nv);
        let mut total = 0.0;
        for i in 0..self.target.len() {
            for v in 0..nv {
                total += self.lambda[i][v] * (u[i][v] - self.target[i][v]).abs();
            }
        }
        total
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub penalty: Option<Penalty>,
    /// Period-0 routes held fixed, one per vehicle.
    pub frozen: Option<Vec<Vec<usize>>>,
    pub config: MatheuristicConfig,
}

/// Per `(i, t)` expected inventory cost as a function of cumulative delivery.
struct InvCurve {
    constant: f64,
    widths: Vec<f64>,
    slopes: Vec<f64>,
    /// Upper bound on cumulative delivery from inventory capacity.
    cap: f64,
}

struct Ctx<'a> {
    p: &'a IrpProblem,
    opts: &'a SolveOptions,
    n: usize,
    nv: usize,
    l: usize,
    dist: DistMatrix,
    alpha: f64,
    big_m: f64,
    curves: Vec<Vec<InvCurve>>,
    hit_time_limit: bool,
}

fn inventory_curves(p: &IrpProblem) -> Vec<Vec<InvCurve>> {
    let inst = &p.inst;
    let (h, e) = (inst.holding_cost, inst.backorder_cost);
    let probs = &p.scenarios.probabilities;
    (0..p.n())
        .map(|i| {
            let i0 = p.inventories[i];
            let mut cum = vec![0.0; p.scenarios.len()];
            let mut prev_min = 0.0;
            (0..p.lookahead())
                .map(|t| {
                    for (c, s) in cum.iter_mut().zip(&p.scenarios.scenarios) {
                        *c += s[i][t];
                    }
                    let breaks: Vec<f64> = cum.iter().map(|&c| c - i0).collect();
                    let constant: f64 = breaks
                        .iter()
                        .zip(probs)
                        .map(|(&b, &q)| q * if b <= 0.0 { -h * b } else { e * b })
                        .sum();
                    let mut xs: Vec<f64> = breaks.iter().copied().filter(|&b| b > TOL).collect();
                    xs.sort_by(f64::total_cmp);
                    xs.dedup_by(|a, b| (*a - *b).abs() <= TOL);
                    xs.insert(0, 0.0);
                    let slopes: Vec<f64> = xs
                        .iter()
                        .map(|&x| {
                            breaks.iter().zip(probs).map(|(&b, &q)| q * if b <= x + TOL { h } else { -e }).sum()
                        })
                        .collect();
                    let widths: Vec<f64> = (0..xs.len())
                        .map(|s| if s + 1 < xs.len() { xs[s + 1] - xs[s] } else { f64::INFINITY })
                        .collect();
                    let cap = inst.inv_capacity - i0 + prev_min;
                    prev_min = cum.iter().copied().fold(f64::INFINITY, f64::min);
                    InvCurve { constant, widths, slopes, cap }
                })
                .collect()
        })
        .collect()
}

impl<'a> Ctx<'a> {
    fn new(p: &'a IrpProblem, opts: &'a SolveOptions) -> Self {
        let inst = &p.inst;
        Ctx {
            p,
            opts,
            n: p.n(),
            nv: inst.n_vehicles,
            l: p.lookahead(),
            dist: inst.distances(),
            alpha: inst.transport_scale,
            big_m: p.big_m(),
            curves: inventory_curves(p),
            hit_time_limit: false,
        }
    }

    fn q(&self) -> f64 {
        self.p.inst.vehicle_capacity
    }

    fn route_cost(&self, route: &[usize]) -> f64 {
        let nodes: Vec<usize> = route.iter().map(|&i| node(i)).collect();
        self.alpha * self.dist.tour_length(&nodes)
    }

    fn frozen_at(&self, t: usize) -> Option<&Vec<Vec<usize>>> {
        if t == 0 {
            self.opts.frozen.as_ref()
        } else {
            None
        }
    }

    fn new_model(&self) -> MilpModel {
        let mut m = MilpModel::new();
        m.node_limit = Some(self.opts.config.node_limit);
        m.time_limit = self.opts.config.time_limit.map(Duration::from_secs_f64);
        m.gap_tol = self.opts.config.gap_tol;
        m
    }

    /// Adds the expected inventory cost of period deliveries `delivered[t][i]`.
    fn add_inventory(&self, m: &mut MilpModel, delivered: &[Vec<LinExpr>]) {
        for i in 0..self.n {
            let mut cum = LinExpr::new();
            for t in 0..self.l {
                for &(v, c) in &delivered[t][i].terms {
                    cum.add(v, c);
                }
                let curve = &self.curves[i][t];
                m.add_con(format!("icap_t{t}_{i}"), cum.clone(), Sense::Le, curve.cap);
                m.obj_offset += curve.constant;
                let mut row = LinExpr::new();
                for (s, (&w, &slope)) in curve.widths.iter().zip(&curve.slopes).enumerate() {
                    let d = m.continuous(format!("seg_t{t}_{i}_{s}"), 0.0, w, slope);
                    row.add(d, 1.0);
                }
                for &(v, c) in &cum.terms {
                    row.add(v, -c);
                }
                m.add_con(format!("inv_t{t}_{i}"), row, Sense::Eq, 0.0);
            }
        }
    }

    fn solve(&mut self, m: &mut MilpModel) -> Option<MilpSolution> {
        // The all-zero point fixes every integer at a pattern whose LP
        // completion is feasible; the solver repairs the continuous part.
        let nvars = m.n_vars();
        m.warm_start.get_or_insert_with(|| vec![0.0; nvars]);
        let sol = solve_milp(m);
        if self.opts.config.time_limit.is_some_and(|t| sol.solve_time >= t) {
            self.hit_time_limit = true;
        }
        log::debug!("matheuristic milp: {:?} obj {} nodes {}", sol.status, sol.objective, sol.nodes);
        sol.has_solution().then_some(sol)
    }

    /// Plan cost plus consensus penalty.
    fn score(&self, plans: &[Plan]) -> f64 {
        let cost = super::evaluate(self.p, std::slice::from_ref(&plans.to_vec())).total;
        cost + self.opts.penalty.as_ref().map_or(0.0, |pen| pen.value(&plans[0]))
    }

    fn feasible(&self, plans: &[Plan]) -> bool {
        let sol = IrpSolution::from_plans(self.p, vec![plans.to_vec()], SolveStatus::Feasible);
        let frozen_ok = self.opts.frozen.as_ref().map_or(true, |f| {
            canonical_routes(f.clone(), self.nv) == canonical_routes(plans[0].routes.clone(), self.nv)
        });
        frozen_ok && super::check_solution(self.p, &sol).iter().all(|c| c.valid)
    }
}

/// MILP1: visits and deliveries on the giant-tour arc order, vehicles
/// aggregated. Returns `(deliveries[t][i], visited[t][i])`.
fn milp1(ctx: &mut Ctx, pos: &[usize]) -> Option<(Vec<Vec<f64>>, Vec<Vec<bool>>)> {
    let (n, nv, q, big_m) = (ctx.n, ctx.nv, ctx.q(), ctx.big_m);
    let mut m = ctx.new_model();
    let mut u: Vec<Vec<VarId>> = Vec::with_capacity(ctx.l);
    let mut outdeg: Vec<Vec<Option<LinExpr>>> = Vec::with_capacity(ctx.l);
    for t in 0..ctx.l {
        let ut: Vec<VarId> = (0..n).map(|i| m.continuous(format!("u_t{t}_{i}"), 0.0, big_m, 0.0)).collect();
        if let Some(frozen) = ctx.frozen_at(t) {
            let mut visited = vec![false; n];
            for route in frozen {
                m.obj_offset += ctx.route_cost(route);
                let mut load = LinExpr::new();
                for &i in route {
                    visited[i] = true;
                    load.add(ut[i], 1.0);
                }
                m.add_con(format!("vcap_t{t}"), load, Sense::Le, q);
            }
            for i in 0..n {
                if !visited[i] {
                    m.set_bounds(ut[i], 0.0, 0.0);
                }
            }
            u.push(ut);
            outdeg.push(vec![None; n]);
            continue;
        }
        let c = |a: usize, b: usize| ctx.alpha * ctx.dist.get(a, b);
        let from_depot: Vec<VarId> = (0..n)
            .map(|j| m.add_var(format!("y_t{t}_0_{j}"), VarKind::Integer, 0.0, nv as f64, c(0, node(j))))
            .collect();
        let to_depot: Vec<VarId> = (0..n)
            .map(|j| m.add_var(format!("y_t{t}_{j}_0"), VarKind::Integer, 0.0, nv as f64, c(node(j), 0)))
            .collect();
        let mut out: Vec<LinExpr> = (0..n).map(|i| LinExpr::new().term(to_depot[i], 1.0)).collect();
        let mut inn: Vec<LinExpr> = (0..n).map(|i| LinExpr::new().term(from_depot[i], 1.0)).collect();
        for i in 0..n {
            for j in 0..n {
                if pos[i] < pos[j] {
                    let x = m.binary(format!("x_t{t}_{i}_{j}"), c(node(i), node(j)));
                    out[i].add(x, 1.0);
                    inn[j].add(x, 1.0);
                }
            }
        }
        let mut leave = LinExpr::new();
        let mut back = LinExpr::new();
        for j in 0..n {
            leave.add(from_depot[j], 1.0);
            back.add(to_depot[j], -1.0);
        }
        m.add_con(format!("fleet_t{t}"), leave.clone(), Sense::Le, nv as f64);
        let mut bal = leave.clone();
        bal.terms.extend(back.terms);
        m.add_con(format!("depot_flow_t{t}"), bal, Sense::Eq, 0.0);
        let mut load = LinExpr::new();
        for i in 0..n {
            let mut bal = out[i].clone();
            for &(v, cf) in &inn[i].terms {
                bal.add(v, -cf);
            }
            m.add_con(format!("flow_t{t}_{i}"), bal, Sense::Eq, 0.0);
            m.add_con(format!("once_t{t}_{i}"), out[i].clone(), Sense::Le, 1.0);
            let mut link = LinExpr::new().term(ut[i], 1.0);
            for &(v, cf) in &out[i].terms {
                link.add(v, -big_m * cf);
            }
            m.add_con(format!("link_t{t}_{i}"), link, Sense::Le, 0.0);
            load.add(ut[i], 1.0);
        }
        for &(v, cf) in &leave.terms {
            load.add(v, -q * cf);
        }
        m.add_con(format!("fleet_cap_t{t}"), load, Sense::Le, 0.0);
        u.push(ut);
        outdeg.push(out.into_iter().map(Some).collect());
    }
    if let Some(pen) = &ctx.opts.penalty {
        for i in 0..n {
            let target: f64 = pen.target[i].iter().sum();
            let e = LinExpr::new().term(u[0][i], 1.0).term_const(-target);
            add_abs_linearization(&mut m, &e, pen.lambda_agg[i]);
        }
    }
    let delivered: Vec<Vec<LinExpr>> =
        u.iter().map(|ut| ut.iter().map(|&v| LinExpr::new().term(v, 1.0)).collect()).collect();
    ctx.add_inventory(&mut m, &delivered);

    let sol = ctx.solve(&mut m)?;
    let deliveries: Vec<Vec<f64>> = u.iter().map(|ut| ut.iter().map(|&v| sol.x[v].max(0.0)).collect()).collect();
    let visited = (0..ctx.l)
        .map(|t| match ctx.frozen_at(t) {
            Some(frozen) => {
                let mut vis = vec![false; n];
                frozen.iter().flatten().for_each(|&i| vis[i] = true);
                vis
            }
            None => outdeg[t].iter().map(|e| e.as_ref().map_or(false, |e| e.eval(&sol.x) > 0.5)).collect(),
        })
        .collect();
    Some((deliveries, visited))
}

/// Step 3: vehicle tours for the visited sets.
fn split_routes(ctx: &Ctx, deliveries: &[Vec<f64>], visited: &[Vec<bool>]) -> Vec<Vec<Vec<usize>>> {
    (0..ctx.l)
        .map(|t| {
            if let Some(frozen) = ctx.frozen_at(t) {
                return canonical_routes(frozen.clone(), ctx.nv);
            }
            let nodes: Vec<usize> = (0..ctx.n).filter(|&i| visited[t][i]).map(node).collect();
            let to_route = |tour: Vec<usize>| tour.into_iter().map(|k| k - 1).collect::<Vec<_>>();
            let routes = if ctx.nv == 1 {
                vec![to_route(tsp_solve(&nodes, &ctx.dist).nodes)]
            } else {
                let demands: Vec<f64> = nodes.iter().map(|&k| deliveries[t][k - 1]).collect();
                match cvrp_solve(&nodes, &demands, ctx.q(), ctx.nv, &ctx.dist) {
                    Ok(tours) => tours.into_iter().map(|tour| to_route(tour.nodes)).collect(),
                    // MILP2 restores per-vehicle capacity.
                    Err(_) => vec![to_route(tsp_solve(&nodes, &ctx.dist).nodes)],
                }
            };
            canonical_routes(routes, ctx.nv)
        })
        .collect()
}

fn plans_from(routes: &[Vec<Vec<usize>>], deliveries: &[Vec<f64>]) -> Vec<Plan> {
    routes
        .iter()
        .zip(deliveries)
        .map(|(r, d)| {
            let mut deliveries = d.clone();
            // Deliveries only where the plan visits.
            let mut visited = vec![false; d.len()];
            r.iter().flatten().for_each(|&i| visited[i] = true);
            for (x, &vis) in deliveries.iter_mut().zip(&visited) {
                if !vis {
                    *x = 0.0;
                }
            }
            Plan { routes: r.clone(), deliveries }
        })
        .collect()
}

/// Adds `u^{iv}_0` consensus penalties for per-vehicle delivery variables.
fn add_vehicle_penalty(m: &mut MilpModel, pen: &Penalty, u0: &[Vec<Option<VarId>>]) {
    for (i, row) in u0.iter().enumerate() {
        for (v, var) in row.iter().enumerate() {
            let (lambda, target) = (pen.lambda[i][v], pen.target[i][v]);
            match var {
                Some(var) => {
                    let e = LinExpr::new().term(*var, 1.0).term_const(-target);
                    add_abs_linearization(m, &e, lambda);
                }
                None => m.obj_offset += lambda * target.abs(),
            }
        }
    }
}

/// MILP2: insertions and removals against the current tours, then Step 5
/// re-sequencing. Returns canonical routes and deliveries.
fn milp2(ctx: &mut Ctx, routes: &[Vec<Vec<usize>>]) -> Option<(Vec<Vec<Vec<usize>>>, Vec<Vec<f64>>)> {
    let (n, nv, q, big_m) = (ctx.n, ctx.nv, ctx.q(), ctx.big_m);
    let mut m = ctx.new_model();
    // u[t][i][v]; ins/rem[t][i][v] = (var, is_insertion)
    let mut u = vec![vec![vec![0; nv]; n]; ctx.l];
    let mut moves: Vec<Vec<Vec<Option<(VarId, bool)>>>> = vec![vec![vec![None; nv]; n]; ctx.l];
    for t in 0..ctx.l {
        let fixed = ctx.frozen_at(t).is_some();
        for r in &routes[t] {
            m.obj_offset += ctx.route_cost(r);
        }
        let tours: Vec<Vec<usize>> = routes[t].iter().map(|r| r.iter().map(|&i| node(i)).collect()).collect();
        for i in 0..n {
            let mut once = LinExpr::new();
            for v in 0..nv {
                let on_route = routes[t][v].contains(&i);
                let uv = m.continuous(format!("u_t{t}_{v}_{i}"), 0.0, big_m, 0.0);
                u[t][i][v] = uv;
                // w = a - a r + (1 - a) s
                let mut w = LinExpr::new();
                if fixed {
                    w.add_constant(if on_route { 1.0 } else { 0.0 });
                } else if on_route {
                    let gain = ctx.alpha * removal_gain(&tours[v], node(i), &ctx.dist);
                    let r = m.binary(format!("r_t{t}_{v}_{i}"), -gain);
                    moves[t][i][v] = Some((r, false));
                    w.add_constant(1.0);
                    w.add(r, -1.0);
                } else {
                    let (_, delta) = insertion_cost(&tours[v], node(i), &ctx.dist);
                    let s = m.binary(format!("s_t{t}_{v}_{i}"), ctx.alpha * delta);
                    moves[t][i][v] = Some((s, true));
                    w.add(s, 1.0);
                }
                for &(var, c) in &w.terms {
                    once.add(var, c);
                }
                once.add_constant(w.constant);
                let mut link = LinExpr::new().term(uv, 1.0);
                for &(var, c) in &w.terms {
                    link.add(var, -big_m * c);
                }
                m.add_con(format!("link_t{t}_{v}_{i}"), link, Sense::Le, big_m * w.constant);
            }
            let rhs = 1.0 - once.constant;
            once.constant = 0.0;
            if !once.terms.is_empty() {
                m.add_con(format!("once_t{t}_{i}"), once, Sense::Le, rhs);
            }
        }
        for v in 0..nv {
            let mut load = LinExpr::new();
            for row in &u[t] {
                load.add(row[v], 1.0);
            }
            m.add_con(format!("vcap_t{t}_{v}"), load, Sense::Le, q);
        }
    }
    if let Some(pen) = ctx.opts.penalty.clone() {
        let u0: Vec<Vec<Option<VarId>>> = u[0].iter().map(|row| row.iter().map(|&v| Some(v)).collect()).collect();
        add_vehicle_penalty(&mut m, &pen, &u0);
    }
    let delivered: Vec<Vec<LinExpr>> = u
        .iter()
        .map(|ut| {
            ut.iter()
                .map(|row| {
                    let mut e = LinExpr::new();
                    row.iter().for_each(|&v| e.add(v, 1.0));
                    e
                })
                .collect()
        })
        .collect();
    ctx.add_inventory(&mut m, &delivered);

    let sol = ctx.solve(&mut m)?;
    let mut new_routes = Vec::with_capacity(ctx.l);
    let mut deliveries = Vec::with_capacity(ctx.l);
    for t in 0..ctx.l {
        let mut rt: Vec<Vec<usize>> = routes[t].clone();
        for v in 0..nv {
            rt[v].retain(|&i| !matches!(moves[t][i][v], Some((r, false)) if sol.x[r] > 0.5));
        }
        for v in 0..nv {
            for i in 0..n {
                if matches!(moves[t][i][v], Some((s, true)) if sol.x[s] > 0.5) {
                    let tour: Vec<usize> = rt[v].iter().map(|&k| node(k)).collect();
                    let (p, _) = insertion_cost(&tour, node(i), &ctx.dist);
                    rt[v].insert(p, i);
                }
            }
        }
        if ctx.frozen_at(t).is_none() {
            for r in rt.iter_mut() {
                *r = retsp(r, &ctx.dist);
            }
        }
        deliveries.push((0..n).map(|i| u[t][i].iter().map(|&v| sol.x[v].max(0.0)).sum()).collect());
        new_routes.push(canonical_routes(rt, nv));
    }
    Some((new_routes, deliveries))
}

/// MILP3: deliveries and skipped visits with each route's order fixed,
/// followed by Step 7 re-sequencing.
fn milp3(
    ctx: &mut Ctx,
    routes: &[Vec<Vec<usize>>],
    deliveries: &[Vec<f64>],
) -> Option<(Vec<Vec<Vec<usize>>>, Vec<Vec<f64>>)> {
    let (n, nv, q, big_m) = (ctx.n, ctx.nv, ctx.q(), ctx.big_m);
    let mut m = ctx.new_model();
    let mut u: Vec<Vec<Vec<Option<VarId>>>> = vec![vec![vec![None; nv]; n]; ctx.l];
    // arcs[t][v] = (from, to, var) with retailer indices, None for the depot.
    let mut arcs: Vec<Vec<Vec<(Option<usize>, Option<usize>, VarId)>>> = vec![vec![Vec::new(); nv]; ctx.l];
    let mut ws = Vec::new();
    for t in 0..ctx.l {
        let fixed = ctx.frozen_at(t).is_some();
        for (v, route) in routes[t].iter().enumerate() {
            if route.is_empty() {
                continue;
            }
            let uv: Vec<VarId> =
                route.iter().map(|&i| m.continuous(format!("u_t{t}_{v}_{i}"), 0.0, big_m, 0.0)).collect();
            let mut load = LinExpr::new();
            uv.iter().for_each(|&x| load.add(x, 1.0));
            m.add_con(format!("vcap_t{t}_{v}"), load, Sense::Le, q);
            for (k, &i) in route.iter().enumerate() {
                u[t][i][v] = Some(uv[k]);
            }
            if fixed {
                m.obj_offset += ctx.route_cost(route);
                continue;
            }
            let c = |a: Option<usize>, b: Option<usize>| {
                ctx.alpha * ctx.dist.get(a.map_or(0, node), b.map_or(0, node))
            };
            let mut list = Vec::new();
            let k = route.len();
            for a in 0..k {
                list.push((None, Some(route[a])));
                for b in a + 1..k {
                    list.push((Some(route[a]), Some(route[b])));
                }
                list.push((Some(route[a]), None));
            }
            let mut out = vec![LinExpr::new(); k];
            let mut inn = vec![LinExpr::new(); k];
            let mut leave = LinExpr::new();
            let mut back = LinExpr::new();
            for &(a, b) in &list {
                let x = m.binary(format!("z_t{t}_{v}_{a:?}_{b:?}"), c(a, b));
                let idx = |r: usize| route.iter().position(|&y| y == r).unwrap();
                match a {
                    None => leave.add(x, 1.0),
                    Some(r) => out[idx(r)].add(x, 1.0),
                }
                match b {
                    None => back.add(x, 1.0),
                    Some(r) => inn[idx(r)].add(x, 1.0),
                }
                // The current order is the warm start.
                let consecutive = match (a, b) {
                    (None, Some(r)) => route[0] == r,
                    (Some(r), None) => route[k - 1] == r,
                    (Some(r), Some(s)) => idx(s) == idx(r) + 1,
                    (None, None) => false,
                };
                ws.push((x, if consecutive { 1.0 } else { 0.0 }));
                arcs[t][v].push((a, b, x));
            }
            m.add_con(format!("depot_out_t{t}_{v}"), leave.clone(), Sense::Le, 1.0);
            let mut bal = leave;
            back.terms.iter().for_each(|&(x, cf)| bal.add(x, -cf));
            m.add_con(format!("depot_flow_t{t}_{v}"), bal, Sense::Eq, 0.0);
            for a in 0..k {
                let mut bal = out[a].clone();
                inn[a].terms.iter().for_each(|&(x, cf)| bal.add(x, -cf));
                m.add_con(format!("flow_t{t}_{v}_{a}"), bal, Sense::Eq, 0.0);
                let mut link = LinExpr::new().term(uv[a], 1.0);
                out[a].terms.iter().for_each(|&(x, cf)| link.add(x, -big_m * cf));
                m.add_con(format!("link_t{t}_{v}_{a}"), link, Sense::Le, 0.0);
            }
        }
    }
    if let Some(pen) = ctx.opts.penalty.clone() {
        add_vehicle_penalty(&mut m, &pen, &u[0]);
    }
    let delivered: Vec<Vec<LinExpr>> = u
        .iter()
        .map(|ut| {
            ut.iter()
                .map(|row| {
                    let mut e = LinExpr::new();
                    row.iter().flatten().for_each(|&v| e.add(v, 1.0));
                    e
                })
                .collect()
        })
        .collect();
    ctx.add_inventory(&mut m, &delivered);

    let mut start = vec![0.0; m.n_vars()];
    for (x, val) in ws {
        start[x] = val;
    }
    for t in 0..ctx.l {
        for i in 0..n {
            for v in 0..nv {
                if let Some(x) = u[t][i][v] {
                    start[x] = deliveries[t][i];
                }
            }
        }
    }
    m.warm_start = Some(start);
    let sol = ctx.solve(&mut m)?;

    let mut new_routes = Vec::with_capacity(ctx.l);
    let mut out_deliveries = Vec::with_capacity(ctx.l);
    for t in 0..ctx.l {
        let rt: Vec<Vec<usize>> = if ctx.frozen_at(t).is_some() {
            routes[t].clone()
        } else {
            (0..nv)
                .map(|v| {
                    let next = |from: Option<usize>| {
                        arcs[t][v].iter().find(|&&(a, _, x)| a == from && sol.x[x] > 0.5).map(|&(_, b, _)| b)
                    };
                    let mut route = Vec::new();
                    let mut cur = None;
                    while let Some(Some(j)) = next(cur) {
                        if route.len() > n {
                            break;
                        }
                        route.push(j);
                        cur = Some(j);
                    }
                    retsp(&route, &ctx.dist)
                })
                .collect()
        };
        out_deliveries
            .push((0..n).map(|i| u[t][i].iter().flatten().map(|&x| sol.x[x].max(0.0)).sum()).collect());
        new_routes.push(canonical_routes(rt, nv));
    }
    Some((new_routes, out_deliveries))
}

trait TermConst {
    fn term_const(self, c: f64) -> Self;
}

impl TermConst for LinExpr {
    fn term_const(mut self, c: f64) -> Self {
        self.add_constant(c);
        self
    }
}

/// Solves the SS problem (all scenarios on one plan) or, with a single
/// scenario and optional penalty/frozen routes, a PHA subproblem. Returns the
/// best feasible plan seen across Steps 3, 5 and 7.
pub fn matheuristic_solve(problem: &IrpProblem, opts: &SolveOptions) -> IrpSolution {
    let mut ctx = Ctx::new(problem, opts);
    let n = ctx.n;
    let giant = tsp_solve(&(1..=n).collect::<Vec<_>>(), &ctx.dist);
    let mut pos = vec![0; n];
    for (k, &nd) in giant.nodes.iter().enumerate() {
        pos[nd - 1] = k;
    }

    let mut best: Option<(f64, Vec<Plan>)> = None;
    let mut offer = |ctx: &Ctx, plans: Vec<Plan>, step: &str| {
        if !ctx.feasible(&plans) {
            log::debug!("matheuristic: {step} plan infeasible");
            return;
        }
        let score = ctx.score(&plans);
        log::debug!("matheuristic: {step} score {score}");
        if best.as_ref().map_or(true, |(b, _)| score < *b - 1e-9) {
            best = Some((score, plans));
        }
    };
    let empty_routes = vec![canonical_routes(Vec::new(), ctx.nv); ctx.l];
    let zero = vec![vec![0.0; n]; ctx.l];
    let baseline: Vec<Vec<Vec<usize>>> = (0..ctx.l)
        .map(|t| ctx.frozen_at(t).map_or_else(|| empty_routes[t].clone(), |f| canonical_routes(f.clone(), ctx.nv)))
        .collect();
    offer(&ctx, plans_from(&baseline, &zero), "baseline");

    let mut routes = baseline.clone();
    if let Some((deliveries, visited)) = milp1(&mut ctx, &pos) {
        routes = split_routes(&ctx, &deliveries, &visited);
        offer(&ctx, plans_from(&routes, &deliveries), "step 3");
    }
    let mut current = routes.clone();
    let mut current_d = zero.clone();
    if let Some((r2, d2)) = milp2(&mut ctx, &routes) {
        offer(&ctx, plans_from(&r2, &d2), "step 5");
        current = r2;
        current_d = d2;
    }
    if let Some((r3, d3)) = milp3(&mut ctx, &current, &current_d) {
        offer(&ctx, plans_from(&r3, &d3), "step 7");
    }

    let (_, plans) = best.expect("the no-delivery baseline is always feasible");
    let status = if ctx.hit_time_limit { SolveStatus::TimeLimit } else { SolveStatus::Feasible };
    let mut sol = IrpSolution::from_plans(problem, vec![plans], status);
    if let Some(pen) = &opts.penalty {
        sol.penalty = pen.value(&sol.plans[0][0]);
    }
    sol
}
