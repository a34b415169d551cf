//! Progressive hedging over one-scenario subproblems, with consensus enforced
//! on period-0 per-vehicle deliveries and period-0 routes frozen once every
//! scenario agrees on them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::matheuristic::{matheuristic_solve, MatheuristicConfig, Penalty, SolveOptions};
use super::{canonical_routes, clip_branches, retsp, vehicle_loads, IrpProblem, IrpSolution, SolveStatus};
use crate::model::Plan;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaParams {
    pub rho0: f64,
    pub beta_d: f64,
    pub beta_p: f64,
    /// Extra factor on `rho` updates once period-0 routes are frozen.
    pub beta0: f64,
    pub eps: f64,
    pub max_iter: usize,
    /// Solve subproblems on the rayon pool.
    pub parallel: bool,
    pub matheuristic: MatheuristicConfig,
}

impl Default for PhaParams {
    fn default() -> Self {
        PhaParams {
            rho0: 0.001,
            beta_d: 1.05,
            beta_p: 1.05,
            beta0: 1.2,
            eps: 0.1,
            max_iter: 50,
            parallel: true,
            matheuristic: MatheuristicConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaIter {
    pub r: usize,
    /// Penalty parameter after this iteration's update.
    pub rho: f64,
    pub residual: f64,
    pub theta_p: f64,
    pub theta_d: f64,
    pub frozen: bool,
    pub min_lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaReport {
    pub trace: Vec<PhaIter>,
    pub converged: bool,
    /// Iteration whose subproblem solutions produced the final decision.
    pub best_iter: usize,
    pub residual: f64,
    /// Consensus `ū[i][v]` of the best iteration.
    pub ubar: Vec<Vec<f64>>,
    /// Subproblem period-0 deliveries `u[w][i][v]` of the best iteration.
    pub subproblem_u: Vec<Vec<Vec<f64>>>,
    pub frozen_routes: Option<Vec<Vec<usize>>>,
}

/// `sum_w p_w sum_{i,v} |u - ū|`.
pub fn consensus_residual(u: &[Vec<Vec<f64>>], ubar: &[Vec<f64>], probs: &[f64]) -> f64 {
    u.iter()
        .zip(probs)
        .map(|(uw, &p)| {
            p * uw.iter().zip(ubar).flat_map(|(a, b)| a.iter().zip(b)).map(|(x, y)| (x - y).abs()).sum::<f64>()
        })
        .sum()
}

fn weighted_mean(u: &[Vec<Vec<f64>>], probs: &[f64]) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; u[0][0].len()]; u[0].len()];
    for (uw, &p) in u.iter().zip(probs) {
        for (mi, ui) in m.iter_mut().zip(uw) {
            for (a, &b) in mi.iter_mut().zip(ui) {
                *a += p * b;
            }
        }
    }
    m
}

fn sum_sq(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y)).map(|(x, y)| (x - y).powi(2)).sum()
}

struct Iterate {
    sols: Vec<IrpSolution>,
    u: Vec<Vec<Vec<f64>>>,
    ubar: Vec<Vec<f64>>,
    residual: f64,
    r: usize,
}

/// Progressive hedging for the two-stage problem.
pub fn pha_solve(problem: &IrpProblem, params: &PhaParams) -> IrpSolution {
    let n = problem.n();
    let nv = problem.inst.n_vehicles;
    let probs = problem.scenarios.probabilities.clone();
    let n_scen = problem.scenarios.len();
    let subs: Vec<IrpProblem> = (0..n_scen).map(|w| problem.single(w)).collect();

    let solve_all = |opts: &[SolveOptions]| -> Vec<IrpSolution> {
        if params.parallel {
            subs.par_iter().zip(opts).map(|(p, o)| matheuristic_solve(p, o)).collect()
        } else {
            subs.iter().zip(opts).map(|(p, o)| matheuristic_solve(p, o)).collect()
        }
    };
    let loads = |sols: &[IrpSolution]| -> Vec<Vec<Vec<f64>>> {
        sols.iter().map(|s| vehicle_loads(&s.plans[0][0], n, nv)).collect()
    };

    let base = SolveOptions { config: params.matheuristic.clone(), ..Default::default() };
    let sols = solve_all(&vec![base.clone(); n_scen]);
    let u = loads(&sols);
    let ubar = weighted_mean(&u, &probs);
    let mut rho = params.rho0;
    let mut lambda: Vec<Vec<Vec<f64>>> = u
        .iter()
        .map(|uw| uw.iter().zip(&ubar).map(|(a, b)| a.iter().zip(b).map(|(x, y)| rho * (x - y).abs()).collect()).collect())
        .collect();
    let agg = |row: &[f64]| row.iter().sum::<f64>();
    let mut lambda_agg: Vec<Vec<f64>> =
        u.iter().map(|uw| uw.iter().zip(&ubar).map(|(a, b)| rho * (agg(a) - agg(b)).abs()).collect()).collect();
    let residual = consensus_residual(&u, &ubar, &probs);
    let mut theta_d_hist = vec![sum_sq_all(&u, &ubar)];
    let mut theta_p_hist = vec![0.0];
    let mut trace = vec![PhaIter {
        r: 0,
        rho,
        residual,
        theta_p: 0.0,
        theta_d: theta_d_hist[0],
        frozen: false,
        min_lambda: min_of(&lambda),
    }];
    log::debug!("pha r=0 residual {residual}");
    let mut best = Iterate { sols, u, ubar, residual, r: 0 };
    let mut current_ubar = best.ubar.clone();
    let mut frozen: Option<Vec<Vec<usize>>> = None;
    let mut converged = residual <= params.eps;

    let mut r = 0;
    while !converged && r < params.max_iter {
        r += 1;
        let opts: Vec<SolveOptions> = (0..n_scen)
            .map(|w| SolveOptions {
                penalty: Some(Penalty {
                    lambda: lambda[w].clone(),
                    lambda_agg: lambda_agg[w].clone(),
                    target: current_ubar.clone(),
                }),
                frozen: frozen.clone(),
                config: params.matheuristic.clone(),
            })
            .collect();
        let sols = solve_all(&opts);
        if frozen.is_none() {
            let first = canonical_routes(sols[0].plans[0][0].routes.clone(), nv);
            if sols.iter().all(|s| canonical_routes(s.plans[0][0].routes.clone(), nv) == first) {
                log::debug!("pha r={r}: period-0 routes agree; freezing");
                frozen = Some(first);
            }
        }
        let u = loads(&sols);
        let prev_ubar = current_ubar;
        let ubar = weighted_mean(&u, &probs);
        let theta_p = sum_sq(&ubar, &prev_ubar);
        let theta_d = sum_sq_all(&u, &ubar);

        for w in 0..n_scen {
            for i in 0..n {
                for v in 0..nv {
                    lambda[w][i][v] += rho * (u[w][i][v] - prev_ubar[i][v]).abs();
                }
                lambda_agg[w][i] += rho * (agg(&u[w][i]) - agg(&prev_ubar[i])).abs();
            }
        }
        theta_d_hist.push(theta_d);
        theta_p_hist.push(theta_p);
        // rho^(r) from the differences theta^(r-1) - theta^(r-2).
        let beta0 = if frozen.is_some() { params.beta0 } else { 1.0 };
        if r >= 2 {
            let (d1, d2) = (theta_d_hist[r - 1], theta_d_hist[r - 2]);
            let (p1, p2) = (theta_p_hist[r - 1], theta_p_hist[r - 2]);
            if d1 - d2 > 0.0 {
                rho *= beta0 * params.beta_d;
            } else if p1 - p2 > 0.0 {
                rho /= beta0 * params.beta_p;
            }
        }
        let residual = consensus_residual(&u, &ubar, &probs);
        log::debug!("pha r={r} residual {residual} rho {rho}");
        trace.push(PhaIter {
            r,
            rho,
            residual,
            theta_p,
            theta_d,
            frozen: frozen.is_some(),
            min_lambda: min_of(&lambda),
        });
        converged = residual <= params.eps;
        current_ubar = ubar.clone();
        if residual < best.residual || converged {
            best = Iterate { sols, u, ubar, residual, r };
        }
    }

    finish(problem, best, frozen, trace, converged)
}

fn sum_sq_all(u: &[Vec<Vec<f64>>], ubar: &[Vec<f64>]) -> f64 {
    u.iter().map(|uw| sum_sq(uw, ubar)).sum()
}

fn min_of(lambda: &[Vec<Vec<f64>>]) -> f64 {
    lambda.iter().flatten().flatten().copied().fold(f64::INFINITY, f64::min)
}

/// Builds the consensus decision and the per-scenario branches.
fn finish(
    problem: &IrpProblem,
    best: Iterate,
    frozen: Option<Vec<Vec<usize>>>,
    trace: Vec<PhaIter>,
    converged: bool,
) -> IrpSolution {
    let inst = &problem.inst;
    let n = problem.n();
    let nv = inst.n_vehicles;
    let dist = inst.distances();

    let routes = frozen.clone().unwrap_or_else(|| modal_routes(&best.sols, &problem.scenarios.probabilities, nv));
    let mut on_route = vec![None; n];
    for (v, r) in routes.iter().enumerate() {
        for &i in r {
            on_route[i] = Some(v);
        }
    }
    let mut deliveries: Vec<f64> = (0..n)
        .map(|i| match on_route[i] {
            Some(_) => {
                let total: f64 = best.ubar[i].iter().sum();
                total.clamp(0.0, (inst.inv_capacity - problem.inventories[i]).max(0.0))
            }
            None => 0.0,
        })
        .collect();
    for r in &routes {
        let load: f64 = r.iter().map(|&i| deliveries[i]).sum();
        if load > inst.vehicle_capacity {
            let scale = inst.vehicle_capacity / load;
            r.iter().for_each(|&i| deliveries[i] *= scale);
        }
    }
    // Visits that receive nothing are dropped unless the routes were frozen.
    let routes: Vec<Vec<usize>> = if frozen.is_some() {
        routes
    } else {
        routes.iter().map(|r| retsp(&r.iter().copied().filter(|&i| deliveries[i] > 1e-9).collect::<Vec<_>>(), &dist)).collect()
    };
    let decision = Plan { routes: canonical_routes(routes, nv), deliveries };

    let mut plans: Vec<Vec<Plan>> = best
        .sols
        .iter()
        .map(|s| {
            let mut b = s.plans[0].clone();
            b[0] = decision.clone();
            b
        })
        .collect();
    clip_branches(problem, &mut plans);
    let mut sol = IrpSolution::from_plans(problem, plans, SolveStatus::Feasible);
    if best.sols.iter().any(|s| s.status == SolveStatus::TimeLimit) {
        sol.status = SolveStatus::TimeLimit;
    }
    sol.pha = Some(PhaReport {
        trace,
        converged,
        best_iter: best.r,
        residual: best.residual,
        ubar: best.ubar,
        subproblem_u: best.u,
        frozen_routes: frozen,
    });
    sol
}

/// The most probable period-0 route set; ties go to the lowest scenario.
fn modal_routes(sols: &[IrpSolution], probs: &[f64], nv: usize) -> Vec<Vec<usize>> {
    let sets: Vec<Vec<Vec<usize>>> =
        sols.iter().map(|s| canonical_routes(s.plans[0][0].routes.clone(), nv)).collect();
    let mut best = (0usize, f64::NEG_INFINITY);
    for (w, set) in sets.iter().enumerate() {
        let mass: f64 = sets.iter().zip(probs).filter(|(s, _)| *s == set).map(|(_, &p)| p).sum();
        if mass > best.1 + 1e-12 {
            best = (w, mass);
        }
    }
    sets[best.0].clone()
}
