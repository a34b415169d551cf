//! Scenario optimisation over an `ℓ`-period lookahead: exact single-stage
//! (SS), two-stage (TS) and one-scenario (OS) models, the three-MILP
//! matheuristic, and progressive hedging over OS subproblems.
//!
//! Plans are indexed `[branch][t]`. SS and OS solutions have one branch shared
//! by every scenario; TS and PHA solutions carry one branch per scenario whose
//! period-0 plans coincide.

mod exact;
mod matheuristic;
mod pha;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::ScenarioSet;
use crate::model::{transport_cost, validate_plan, CostBreakdown, DistMatrix, Instance, Plan, PlanCheck, State};
use crate::routing::tsp_solve;

pub use exact::{build_os, build_ss, build_ts, embed_ss_in_ts, ExactModel, Formulation, ScenarioBlock};
pub use matheuristic::{matheuristic_solve, MatheuristicConfig, Penalty, SolveOptions};
pub use pha::{pha_solve, PhaIter, PhaParams, PhaReport};

pub const SOLUTION_FORMAT: &str = "scpo-solution-v1";

/// One lookahead optimisation: instance, current stock and demand scenarios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrpProblem {
    pub inst: Instance,
    pub inventories: Vec<f64>,
    pub scenarios: ScenarioSet,
}

impl IrpProblem {
    pub fn new(inst: Instance, inventories: Vec<f64>, scenarios: ScenarioSet) -> Result<Self> {
        let p = IrpProblem { inst, inventories, scenarios };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.inst.validate()?;
        self.scenarios.validate()?;
        let n = self.inst.n_retailers;
        if self.inventories.len() != n {
            return Err(Error::Shape(format!("{} inventories for {n} retailers", self.inventories.len())));
        }
        if self.inventories.iter().any(|&v| !v.is_finite() || v > self.inst.inv_capacity + 1e-6) {
            return Err(Error::InvalidInput("inventories must be finite and within capacity".into()));
        }
        if self.scenarios.n_retailers() != n {
            return Err(Error::Shape(format!(
                "scenarios cover {} retailers, instance has {n}",
                self.scenarios.n_retailers()
            )));
        }
        if self.lookahead() == 0 {
            return Err(Error::InvalidInput("lookahead must be at least one period".into()));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.inst.n_retailers
    }

    pub fn lookahead(&self) -> usize {
        self.scenarios.lookahead()
    }

    /// The OS problem of scenario `w` (probability one).
    pub fn single(&self, w: usize) -> IrpProblem {
        IrpProblem {
            inst: self.inst.clone(),
            inventories: self.inventories.clone(),
            scenarios: ScenarioSet { scenarios: vec![self.scenarios.scenarios[w].clone()], probabilities: vec![1.0] },
        }
    }

    /// Vehicle load cap per retailer visit: `min(Q, I^max)`.
    pub fn big_m(&self) -> f64 {
        self.inst.big_m()
    }

    /// Branch used by scenario `w` when a solution has `n_branches` branches.
    fn branch_of(&self, w: usize, n_branches: usize) -> usize {
        if n_branches == 1 {
            0
        } else {
            w
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Feasible,
    TimeLimit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrpSolution {
    /// `plans[branch][t]`.
    pub plans: Vec<Vec<Plan>>,
    /// Expected cost of `plans` recomputed from routes, deliveries and scenarios.
    pub objective: f64,
    pub cost: CostBreakdown,
    /// Consensus penalty carried by a penalised subproblem solve; 0 otherwise.
    pub penalty: f64,
    pub status: SolveStatus,
    /// Objective reported by the MILP solver for exact solves.
    pub model_objective: Option<f64>,
    pub pha: Option<PhaReport>,
}

#[derive(Serialize, Deserialize)]
struct SolutionFile {
    format: String,
    #[serde(flatten)]
    solution: IrpSolution,
}

impl IrpSolution {
    pub(crate) fn from_plans(problem: &IrpProblem, plans: Vec<Vec<Plan>>, status: SolveStatus) -> Self {
        let cost = evaluate(problem, &plans);
        IrpSolution { plans, objective: cost.total, cost, penalty: 0.0, status, model_objective: None, pha: None }
    }

    pub fn first_period(&self) -> &Plan {
        &self.plans[0][0]
    }

    pub fn to_json(&self) -> Result<String> {
        let file = SolutionFile { format: SOLUTION_FORMAT.into(), solution: self.clone() };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SolutionFile = serde_json::from_str(text)?;
        if file.format != SOLUTION_FORMAT {
            return Err(Error::Format { expected: SOLUTION_FORMAT.into(), found: file.format });
        }
        Ok(file.solution)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Expected transport, holding and backorder cost of `plans[branch][t]`
/// under the problem's scenarios. A single branch serves every scenario.
pub fn evaluate(problem: &IrpProblem, plans: &[Vec<Plan>]) -> CostBreakdown {
    let inst = &problem.inst;
    let (mut transport, mut holding, mut backorder) = (0.0, 0.0, 0.0);
    for (w, (scen, &p)) in problem.scenarios.scenarios.iter().zip(&problem.scenarios.probabilities).enumerate() {
        let branch = &plans[problem.branch_of(w, plans.len())];
        let mut inv = problem.inventories.clone();
        for (t, plan) in branch.iter().enumerate() {
            transport += p * transport_cost(plan, inst);
            for (i, level) in inv.iter_mut().enumerate() {
                *level += plan.deliveries[i] - scen[i][t];
                holding += p * inst.holding_cost * level.max(0.0);
                backorder += p * inst.backorder_cost * (-*level).max(0.0);
            }
        }
    }
    CostBreakdown::new(transport, holding, backorder)
}

/// Projected inventory `Î^w_t` per scenario, period and retailer before
/// period-`t` deliveries.
pub(crate) fn inventory_paths(problem: &IrpProblem, branch: &[Plan], w: usize) -> Vec<Vec<f64>> {
    let scen = &problem.scenarios.scenarios[w];
    let mut inv = problem.inventories.clone();
    let mut out = Vec::with_capacity(branch.len());
    for (t, plan) in branch.iter().enumerate() {
        out.push(inv.clone());
        for (i, level) in inv.iter_mut().enumerate() {
            *level += plan.deliveries[i] - scen[i][t];
        }
    }
    out
}

/// Checks every period of every branch against the decision set along the
/// inventory path of each scenario served by that branch.
pub fn check_solution(problem: &IrpProblem, sol: &IrpSolution) -> Vec<PlanCheck> {
    let mut out = Vec::new();
    for w in 0..problem.scenarios.len() {
        let branch = &sol.plans[problem.branch_of(w, sol.plans.len())];
        for (t, inv) in inventory_paths(problem, branch, w).into_iter().enumerate() {
            let state = State { epoch: t, inventories: inv, history: Vec::new() };
            out.push(validate_plan(&state, &branch[t], &problem.inst));
        }
    }
    out
}

/// Lowers deliveries in later periods so each branch respects inventory
/// capacity along every scenario it serves; period 0 is left unchanged.
pub(crate) fn clip_branches(problem: &IrpProblem, plans: &mut [Vec<Plan>]) {
    let n_branches = plans.len();
    let imax = problem.inst.inv_capacity;
    for b in 0..n_branches {
        let served: Vec<usize> =
            (0..problem.scenarios.len()).filter(|&w| problem.branch_of(w, n_branches) == b).collect();
        for t in 1..plans[b].len() {
            for &w in &served {
                let inv = inventory_paths(problem, &plans[b], w);
                for i in 0..problem.n() {
                    let room = (imax - inv[t][i]).max(0.0);
                    if plans[b][t].deliveries[i] > room {
                        plans[b][t].deliveries[i] = room;
                    }
                }
            }
        }
    }
}

/// Node index of retailer `i` in the distance matrices.
pub(crate) fn node(i: usize) -> usize {
    i + 1
}

/// Shortest known order for `route`: the TSP tour unless the current order is
/// already at least as short.
pub(crate) fn retsp(route: &[usize], dist: &DistMatrix) -> Vec<usize> {
    let nodes: Vec<usize> = route.iter().map(|&i| node(i)).collect();
    let current = dist.tour_length(&nodes);
    let tour = tsp_solve(&nodes, dist);
    if tour.length < current - 1e-12 {
        tour.nodes.into_iter().map(|k| k - 1).collect()
    } else {
        route.to_vec()
    }
}

/// Non-empty routes sorted by smallest retailer, padded with empty routes to
/// `vehicles`.
pub(crate) fn canonical_routes(mut routes: Vec<Vec<usize>>, vehicles: usize) -> Vec<Vec<usize>> {
    routes.retain(|r| !r.is_empty());
    routes.sort_by_key(|r| r.iter().copied().min());
    routes.resize(vehicles.max(routes.len()), Vec::new());
    routes
}

/// Per-vehicle delivery `u[i][v]` implied by a plan.
pub(crate) fn vehicle_loads(plan: &Plan, n: usize, vehicles: usize) -> Vec<Vec<f64>> {
    let mut u = vec![vec![0.0; vehicles]; n];
    for (v, route) in plan.routes.iter().enumerate().take(vehicles) {
        for &i in route {
            u[i][v] = plan.deliveries[i];
        }
    }
    u
}

/// The period-0 decision of a solution with every route re-sequenced by the
/// TSP solver.
pub fn extract_decision(sol: &IrpSolution, inst: &Instance) -> Plan {
    let Some(first) = sol.plans.first().and_then(|b| b.first()) else {
        return Plan::empty(inst);
    };
    let dist = inst.distances();
    let mut routes: Vec<Vec<usize>> = first.routes.iter().map(|r| retsp(r, &dist)).collect();
    routes.resize(inst.n_vehicles.max(routes.len()), Vec::new());
    Plan { routes, deliveries: first.deliveries.clone() }
}
