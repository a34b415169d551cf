use super::*;
use rand::{Rng, SeedableRng};

fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

/// Random bounded MILP with `nb` binaries and `nc` continuous variables in
/// `[0, 10]`. Feasible whenever the optional cardinality row is absent.
pub(crate) fn random_milp(seed: u64, nb: usize, nc: usize) -> MilpModel {
    let mut r = rng(seed);
    let mut m = MilpModel::new();
    for j in 0..nb {
        m.binary(format!("b{j}"), r.random_range(-10.0..5.0));
    }
    for j in 0..nc {
        m.continuous(format!("c{j}"), 0.0, 10.0, r.random_range(-3.0..3.0));
    }
    let rows = 2 + r.random_range(0..6);
    for i in 0..rows {
        let mut e = LinExpr::new();
        for j in 0..nb + nc {
            if r.random_bool(0.6) {
                e.add(j, r.random_range(-2.0..6.0));
            }
        }
        m.add_con(format!("r{i}"), e, Sense::Le, r.random_range(1.0..12.0));
    }
    if nb > 1 && r.random_bool(0.5) {
        let mut e = LinExpr::new();
        for j in 0..nb {
            e.add(j, 1.0);
        }
        m.add_con("card", e, Sense::Ge, 1.0);
    }
    m
}

/// Random LP in standard-ish form with mixed senses and feasible point `x0`.
fn random_lp(seed: u64) -> MilpModel {
    let mut r = rng(seed);
    let n = 2 + r.random_range(0..7);
    let rows = 1 + r.random_range(0..6);
    let x0: Vec<f64> = (0..n).map(|_| r.random_range(0.0..5.0)).collect();
    let mut m = MilpModel::new();
    for j in 0..n {
        let ub = if r.random_bool(0.5) { 10.0 } else { f64::INFINITY };
        m.continuous(format!("x{j}"), 0.0, ub, r.random_range(-2.0..3.0));
    }
    for i in 0..rows {
        let coeffs: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..3.0)).collect();
        let lhs: f64 = coeffs.iter().zip(&x0).map(|(a, b)| a * b).sum();
        let mut e = LinExpr::new();
        for (j, &a) in coeffs.iter().enumerate() {
            e.add(j, a);
        }
        let sense = match r.random_range(0..3) {
            0 => Sense::Le,
            1 => Sense::Ge,
            _ => Sense::Eq,
        };
        let rhs = match sense {
            Sense::Le => lhs + r.random_range(0.0..3.0),
            Sense::Ge => lhs - r.random_range(0.0..3.0),
            Sense::Eq => lhs,
        };
        m.add_con(format!("r{i}"), e, sense, rhs);
    }
    // Keeps the LP bounded below.
    let mut e = LinExpr::new();
    for j in 0..n {
        e.add(j, 1.0);
    }
    m.add_con("box", e, Sense::Le, 100.0);
    m
}

#[test]
fn lp_simple_max() {
    let mut m = MilpModel::new();
    let x = m.continuous("x", 0.0, f64::INFINITY, -1.0);
    let y = m.continuous("y", 0.0, f64::INFINITY, -1.0);
    m.add_con("c", LinExpr::new().term(x, 1.0).term(y, 1.0), Sense::Le, 1.0);
    let s = solve_lp(&m);
    assert_eq!(s.status, Status::Optimal);
    assert!((s.objective + 1.0).abs() < 1e-9);
}

#[test]
fn lp_infeasible() {
    let mut m = MilpModel::new();
    let x = m.continuous("x", f64::NEG_INFINITY, f64::INFINITY, 0.0);
    m.add_con("a", LinExpr::new().term(x, 1.0), Sense::Ge, 2.0);
    m.add_con("b", LinExpr::new().term(x, 1.0), Sense::Le, 1.0);
    assert_eq!(solve_lp(&m).status, Status::Infeasible);
    assert_eq!(solve_milp(&m).status, Status::Infeasible);
}

#[test]
fn lp_unbounded() {
    let mut m = MilpModel::new();
    let x = m.continuous("x", 0.0, f64::INFINITY, -1.0);
    m.add_con("a", LinExpr::new().term(x, 1.0), Sense::Ge, 2.0);
    assert_eq!(solve_lp(&m).status, Status::Unbounded);
}

#[test]
fn lp_free_variables() {
    let mut m = MilpModel::new();
    let x = m.continuous("x", f64::NEG_INFINITY, f64::INFINITY, 1.0);
    let y = m.continuous("y", f64::NEG_INFINITY, f64::INFINITY, 0.0);
    m.add_con("a", LinExpr::new().term(x, 1.0).term(y, -1.0), Sense::Ge, -3.0);
    m.add_con("b", LinExpr::new().term(y, 1.0), Sense::Eq, -2.0);
    let s = solve_lp(&m);
    assert_eq!(s.status, Status::Optimal);
    assert!((s.x[x] + 5.0).abs() < 1e-9);
}

/// Independent optimality certificate: primal feasibility, dual sign
/// feasibility and complementary slackness for the row duals `y`.
fn kkt_residual(m: &MilpModel, x: &[f64], y: &[f64]) -> f64 {
    let mut worst = m.max_violation(x);
    for (j, v) in m.vars.iter().enumerate() {
        let mut d = v.obj;
        for (i, c) in m.cons.iter().enumerate() {
            for &(k, a) in &c.terms {
                if k == j {
                    d -= y[i] * a;
                }
            }
        }
        let at_lb = (x[j] - v.lb).abs() <= 1e-7;
        let at_ub = (x[j] - v.ub).abs() <= 1e-7;
        let r = match (at_lb, at_ub) {
            (true, true) => 0.0,
            (true, false) => (-d).max(0.0),
            (false, true) => d.max(0.0),
            (false, false) => d.abs(),
        };
        worst = worst.max(r);
    }
    for (i, c) in m.cons.iter().enumerate() {
        let lhs: f64 = c.terms.iter().map(|&(k, a)| a * x[k]).sum();
        let slack = c.rhs - lhs;
        let r = match c.sense {
            Sense::Le => y[i].max(0.0) + if slack > 1e-7 { y[i].abs() } else { 0.0 },
            Sense::Ge => (-y[i]).max(0.0) + if slack < -1e-7 { y[i].abs() } else { 0.0 },
            Sense::Eq => 0.0,
        };
        worst = worst.max(r);
    }
    worst
}

#[test]
fn lp_duality_oracle_on_random_lps() {
    for seed in 0..50 {
        let m = random_lp(seed);
        let s = solve_lp(&m);
        assert_eq!(s.status, Status::Optimal, "seed {seed}");
        let y = s.duals.as_ref().unwrap();
        let r = kkt_residual(&m, &s.x, y);
        assert!(r <= 1e-6, "seed {seed}: KKT residual {r}");
    }
}

#[test]
fn milp_binary_rounding() {
    let mut m = MilpModel::new();
    let x = m.binary("x", -1.0);
    m.add_con("c", LinExpr::new().term(x, 1.0), Sense::Le, 0.5);
    let s = solve_milp(&m);
    assert_eq!(s.status, Status::Optimal);
    assert_eq!(s.x[x], 0.0);
}

#[test]
fn milp_matches_brute_force() {
    for seed in 0..40 {
        let m = random_milp(seed, 3 + (seed as usize % 8), seed as usize % 6);
        let a = solve_milp(&m);
        let b = brute_force(&m);
        assert_eq!(a.status, b.status, "seed {seed}");
        if b.status == Status::Optimal {
            assert!((a.objective - b.objective).abs() <= 1e-6, "seed {seed}: {} vs {}", a.objective, b.objective);
            assert!(m.is_feasible(&a.x));
            assert!(solve_lp(&m).objective <= a.objective + 1e-9);
        }
    }
}

#[test]
fn milp_general_integers() {
    let mut m = MilpModel::new();
    let x = m.add_var("x", VarKind::Integer, 0.0, 10.0, -3.0);
    let y = m.add_var("y", VarKind::Integer, 0.0, 10.0, -2.0);
    m.add_con("a", LinExpr::new().term(x, 2.0).term(y, 2.0), Sense::Le, 9.0);
    m.add_con("b", LinExpr::new().term(x, 3.0).term(y, -1.0), Sense::Le, 7.5);
    let s = solve_milp(&m);
    let b = brute_force(&m);
    assert!((s.objective - b.objective).abs() < 1e-9);
}

#[test]
fn warm_start_optimum_is_kept() {
    let m = random_milp(7, 6, 2);
    let opt = brute_force(&m);
    let mut warm = m.clone();
    warm.warm_start = Some(opt.x.clone());
    let s = solve_milp(&warm);
    assert_eq!(s.status, Status::Optimal);
    assert!(s.nodes >= 1);
    assert!((s.objective - opt.objective).abs() < 1e-6);
}

#[test]
fn node_limit_reports_gap() {
    let m = random_milp(11, 10, 4);
    let mut limited = m.clone();
    limited.node_limit = Some(1);
    let s = solve_milp(&limited);
    assert!(matches!(s.status, Status::Optimal | Status::Feasible { .. } | Status::TimeLimit));
    assert!(s.bound <= brute_force(&m).objective + 1e-6);
}

#[test]
fn abs_linearization() {
    for (target, mu_v, nu_v) in [(3.0, 3.0, 0.0), (-2.0, 0.0, 2.0)] {
        let mut m = MilpModel::new();
        let x = m.continuous("x", target, target, 0.0);
        let (mu, nu) = add_abs_linearization(&mut m, &LinExpr::new().term(x, 1.0), 2.0);
        let s = solve_lp(&m);
        assert!((s.x[mu] - mu_v).abs() < 1e-9 && (s.x[nu] - nu_v).abs() < 1e-9);
        assert!((s.objective - 2.0 * target.abs()).abs() < 1e-9);
    }
    let mut m = MilpModel::new();
    let x = m.continuous("x", 3.0, 3.0, 1.0);
    add_abs_linearization(&mut m, &LinExpr::new().term(x, 1.0), 0.0);
    assert!((solve_lp(&m).objective - 3.0).abs() < 1e-9);
}

#[test]
fn pospart_linearization() {
    for (inv, h, e, cost) in [(4.0, 0.3, 3.0, 1.2), (-4.0, 0.3, 3.0, 12.0), (4.0, 0.0, 0.0, 0.0)] {
        let mut m = MilpModel::new();
        let mut expr = LinExpr::constant(inv);
        let x = m.continuous("x", 0.0, 0.0, 0.0);
        expr.add(x, 1.0);
        add_pospart_linearization(&mut m, &expr, h, e);
        assert!((solve_lp(&m).objective - cost).abs() < 1e-9);
    }
}

#[test]
fn lp_dump_mentions_everything() {
    let m = random_milp(1, 2, 1);
    let text = m.to_lp_string();
    assert!(text.starts_with("\\"));
    assert!(text.contains("Subject To") && text.contains("Binary") && text.ends_with("End\n"));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn relaxation_bounds_milp(seed in 0u64..100_000, nb in 1usize..9, nc in 0usize..5) {
            let m = random_milp(seed, nb, nc);
            let lp = solve_lp(&m);
            let ip = solve_milp(&m);
            if lp.status == Status::Infeasible {
                prop_assert_eq!(ip.status, Status::Infeasible);
                prop_assert_eq!(brute_force(&m).status, Status::Infeasible);
            }
            if ip.status == Status::Optimal {
                prop_assert!(lp.objective <= ip.objective + 1e-7);
                prop_assert!(m.is_feasible(&ip.x));
                let bf = brute_force(&m);
                prop_assert!((bf.objective - ip.objective).abs() <= 1e-6);
            }
        }
    }
}
