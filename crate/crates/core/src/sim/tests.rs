use proptest::prelude::*;

use super::*;

fn one_retailer(horizon: usize, imax: f64, init: f64) -> Instance {
    Instance {
        n_retailers: 1,
        coords: vec![[0.0, 0.0], [3.0, 4.0]],
        n_vehicles: 1,
        vehicle_capacity: imax,
        inv_capacity: imax,
        holding_cost: 0.3,
        backorder_cost: 3.0,
        transport_scale: 0.05,
        history_len: horizon,
        lookahead: horizon,
        eval_horizon: horizon,
        rng_seed: 0,
        initial_inventory: Some(vec![init]),
        retailer_ids: None,
    }
}

fn three_retailers() -> Instance {
    Instance {
        n_retailers: 3,
        coords: vec![[0.0, 0.0], [10.0, 0.0], [0.0, 12.0], [-8.0, -6.0]],
        n_vehicles: 2,
        vehicle_capacity: 15.0,
        inv_capacity: 12.0,
        holding_cost: 0.3,
        backorder_cost: 3.0,
        transport_scale: 0.05,
        history_len: 4,
        lookahead: 2,
        eval_horizon: 4,
        rng_seed: 0,
        initial_inventory: Some(vec![6.0, 2.0, 0.0]),
        retailer_ids: None,
    }
}

/// `history` periods, then the evaluated demands, then zeros for the lookahead.
fn data(history: Vec<Vec<f64>>, eval: Vec<Vec<f64>>, l: usize) -> EpisodeData {
    let start = history[0].len();
    let truth: Vec<Vec<f64>> = history
        .into_iter()
        .zip(eval)
        .map(|(mut h, e)| {
            h.extend(e);
            h.extend(std::iter::repeat(0.0).take(l));
            h
        })
        .collect();
    let len = truth[0].len();
    EpisodeData { truth, calendar: Calendar::leap_year(len), start }
}

fn mixed_data() -> EpisodeData {
    data(
        vec![vec![3.0, 5.0, 4.0, 6.0], vec![2.0, 2.0, 3.0, 1.0], vec![5.0, 7.0, 6.0, 4.0]],
        vec![vec![4.0, 6.0, 2.0, 5.0], vec![3.0, 0.0, 2.0, 2.0], vec![6.0, 5.0, 7.0, 3.0]],
        2,
    )
}

/// Exhaustive dynamic program over integer deliveries for one retailer with
/// known demand.
fn dp_optimum(inst: &Instance, demand: &[f64]) -> f64 {
    let trip = 2.0 * inst.transport_scale * 5.0;
    let (h, e) = (inst.holding_cost, inst.backorder_cost);
    let imax = inst.inv_capacity as i64;
    let q = inst.vehicle_capacity as i64;
    fn go(k: usize, inv: i64, demand: &[f64], imax: i64, q: i64, trip: f64, h: f64, e: f64) -> f64 {
        if k == demand.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for u in 0..=q.min(imax - inv).max(0) {
            let next = inv + u - demand[k] as i64;
            let stage = if u > 0 { trip } else { 0.0 } + h * next.max(0) as f64 + e * (-next).max(0) as f64;
            best = best.min(stage + go(k + 1, next, demand, imax, q, trip, h, e));
        }
        best
    }
    go(0, inst.initial_inventories()[0] as i64, demand, imax, q, trip, h, e)
}

#[test]
fn policy_names_roundtrip() {
    for s in ["pi", "ev", "emp", "pto:mqrnn", "pto:lstm", "pto:mle", "scpo-ss:mqrnn", "scpo-ts:lstm"] {
        let k: PolicyKind = s.parse().unwrap();
        assert_eq!(serde_json::from_str::<PolicyKind>(&serde_json::to_string(&k).unwrap()).unwrap(), k);
    }
    assert_eq!("scpo-ss:mqrnn".parse::<PolicyKind>().unwrap().label(), "ScPO-SS-MQRNN");
    assert_eq!("PtO:MLE".parse::<PolicyKind>().unwrap().label(), "PtO-MLE");
    assert!("pto".parse::<PolicyKind>().is_err());
    assert!("pi:mqrnn".parse::<PolicyKind>().is_err());
    assert!("scpo-ss:arima".parse::<PolicyKind>().is_err());
}

#[test]
fn scenario_counts() {
    for s in ["pi", "ev", "emp", "pto:mle"] {
        assert_eq!(Policy::new(s.parse().unwrap()).with_scenarios(20).n_scenarios, 1);
    }
    assert_eq!(Policy::new("scpo-ss:mle".parse().unwrap()).n_scenarios, 20);
}

#[test]
fn saving_examples() {
    // ΔCost_m = 567 and ΔCost_EV = 1053 around a PI cost of 5000.
    let s = saving(5567.0, 6053.0, 5000.0).unwrap();
    assert!((s - 0.461538).abs() < 1e-6);
    assert_eq!(saving_percent(s), 46);
    assert_eq!(saving(5000.0, 6053.0, 5000.0), Some(1.0));
    assert_eq!(saving(6053.0, 6053.0, 5000.0), Some(0.0));
    assert_eq!(saving(10.0, 5.0, 5.0), None);
    assert_eq!(saving_percent(0.375), 38);
    assert_eq!(saving_percent(-0.125), -13);
}

#[test]
fn service_examples() {
    assert_eq!(service_level(9.0, 10.0), 0.9);
    assert_eq!(service_level(0.0, 0.0), 1.0);
    assert_eq!(directly_satisfied(5.0, 2.0, 4.0), 4.0);
    assert_eq!(directly_satisfied(-3.0, 5.0, 4.0), 2.0);
    assert_eq!(directly_satisfied(-3.0, 1.0, 4.0), 0.0);
}

#[test]
fn zero_demand_costs_nothing() {
    let mut inst = three_retailers();
    inst.initial_inventory = Some(vec![0.0; 3]);
    let d = data(vec![vec![0.0; 4]; 3], vec![vec![0.0; 4]; 3], 2);
    for s in ["pi", "ev", "emp", "pto:mle", "scpo-ss:mle", "scpo-ts:mle"] {
        let policy = Policy::new(s.parse().unwrap()).with_scenarios(4);
        let ep = run_episode(&inst, &d, &policy, &Forecasters::default(), 1).unwrap();
        assert_eq!(ep.cost.total, 0.0, "{s}");
        assert_eq!(ep.service, 1.0, "{s}");
        assert_eq!(ep.fallbacks, 0);
    }
}

#[test]
fn perfect_information_matches_dynamic_program() {
    for demand in [vec![4.0, 0.0, 6.0], vec![2.0, 2.0, 2.0], vec![0.0, 9.0, 1.0], vec![7.0, 3.0, 8.0]] {
        let inst = one_retailer(3, 10.0, 2.0);
        let d = data(vec![vec![1.0; 3]], vec![demand.clone()], 3);
        let ep = run_episode(&inst, &d, &Policy::new(PolicyKind::Pi), &Forecasters::default(), 0).unwrap();
        let oracle = dp_optimum(&inst, &demand);
        assert!((ep.cost.total - oracle).abs() < 1e-6, "{demand:?}: {} vs {oracle}", ep.cost.total);
        assert_eq!(ep.mse, 0.0);
    }
}

#[test]
fn episodes_are_deterministic() {
    let inst = three_retailers();
    let d = mixed_data();
    for s in ["emp", "pto:mle", "scpo-ss:mle", "scpo-ts:mle"] {
        let policy = Policy::new(s.parse().unwrap()).with_scenarios(5);
        let a = run_episode(&inst, &d, &policy, &Forecasters::default(), 9).unwrap();
        let b = run_episode(&inst, &d, &policy, &Forecasters::default(), 9).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap(), "{s}");
    }
}

#[test]
fn trajectory_invariants() {
    let inst = three_retailers();
    let d = mixed_data();
    for s in ["pi", "ev", "emp", "pto:mle", "scpo-ss:mle"] {
        let policy = Policy::new(s.parse().unwrap()).with_scenarios(6);
        let ep = run_episode(&inst, &d, &policy, &Forecasters::default(), 3).unwrap();
        assert_eq!(ep.epochs.len(), inst.eval_horizon);
        let sum: f64 = ep.epochs.iter().map(|e| e.cost.transport + e.cost.holding + e.cost.backorder).sum();
        assert!((ep.cost.total - sum).abs() <= 1e-6);
        assert!((0.0..=1.0).contains(&ep.service));
        let mut inv = inst.initial_inventories();
        for e in &ep.epochs {
            assert_eq!(e.inventories_before, inv);
            let state = State { epoch: e.epoch, inventories: inv.clone(), history: Vec::new() };
            assert!(validate_plan(&state, &e.plan, &inst).valid, "{s} epoch {}", e.epoch);
            for i in 0..3 {
                inv[i] = (inv[i] + e.plan.deliveries[i]) - e.demand[i];
            }
        }
    }
}

#[test]
fn experiment_rows() {
    let inst = three_retailers();
    let models = Arc::new(Forecasters::default());
    let cases: Vec<Case> = (0..2)
        .map(|seed| Case { pattern: Pattern::Both, instance: inst.clone(), data: mixed_data(), seed, models: models.clone() })
        .collect();
    let policies: Vec<Policy> = ["pi", "ev", "pto:mle"].iter().map(|s| Policy::new(s.parse().unwrap())).collect();
    let report = run_experiment(&cases, &policies).unwrap();
    assert_eq!(report.rows.len(), 3);
    let pi = report.row(Pattern::Both, "PI").unwrap();
    assert_eq!(pi.delta_cost, Some(0.0));
    assert_eq!(pi.saving, Some(1.0));
    assert_eq!(pi.mse, 0.0);
    let ev = report.row(Pattern::Both, "EV").unwrap();
    if ev.cost != pi.cost {
        assert_eq!(ev.saving, Some(0.0));
    }
    for r in &report.rows {
        let eps: Vec<&Episode> = report.episodes.iter().filter(|(_, e)| e.policy == r.policy).map(|(_, e)| e).collect();
        assert_eq!(eps.len(), 2);
        let mean = eps.iter().map(|e| e.cost.total).sum::<f64>() / 2.0;
        assert!((r.cost - mean).abs() < 1e-9);
        assert!((r.cost - r.transport - r.holding - r.backorder).abs() < 1e-6);
    }

    let single = run_experiment(&cases[..1], &policies[2..]).unwrap();
    let ep = run_episode(&inst, &cases[0].data, &policies[2], &models, 0).unwrap();
    assert_eq!(single.rows[0].cost, ep.cost.total);
    assert_eq!(single.rows[0].service, ep.service);
    assert_eq!(single.rows[0].saving, None);

    let back = SimReport::from_json(&report.to_json().unwrap()).unwrap();
    assert_eq!(back.rows, report.rows);
    let csv = report.to_csv().unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("pattern,policy,episodes,cost"));
    let table = format_table(&report.rows, &report.times);
    assert!(table.contains("Saving") && table.contains("100%") && table.contains("Time"));
}

#[test]
fn empty_report_renders_header_only() {
    let t = format_table(&[], &[]);
    assert_eq!(t.lines().count(), 1);
    assert!(t.starts_with("Pattern"));
    assert_eq!(SimReport::empty().to_csv().unwrap().lines().count(), 1);
}

#[test]
fn missing_model_is_an_error() {
    let inst = three_retailers();
    let policy = Policy::new("pto:mqrnn".parse().unwrap());
    assert!(run_episode(&inst, &mixed_data(), &policy, &Forecasters::default(), 0).is_err());
}

#[test]
fn short_truth_is_rejected() {
    let inst = three_retailers();
    let mut d = mixed_data();
    d.truth.iter_mut().for_each(|s| s.truncate(9));
    assert!(run_episode(&inst, &d, &Policy::new(PolicyKind::Pi), &Forecasters::default(), 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pi_matches_dp_on_random_demand(demand in proptest::collection::vec(0u8..8, 3), init in 0u8..6) {
        let demand: Vec<f64> = demand.into_iter().map(f64::from).collect();
        let inst = one_retailer(3, 10.0, f64::from(init));
        let d = data(vec![vec![2.0; 3]], vec![demand.clone()], 3);
        let ep = run_episode(&inst, &d, &Policy::new(PolicyKind::Pi), &Forecasters::default(), 0).unwrap();
        prop_assert!((ep.cost.total - dp_optimum(&inst, &demand)).abs() < 1e-6);
    }

    #[test]
    fn emp_service_is_a_fraction_and_pi_mse_zero(seed in 0u64..1000) {
        let inst = three_retailers();
        let d = mixed_data();
        let pi = run_episode(&inst, &d, &Policy::new(PolicyKind::Pi), &Forecasters::default(), seed).unwrap();
        let emp = run_episode(&inst, &d, &Policy::new(PolicyKind::Emp), &Forecasters::default(), seed).unwrap();
        prop_assert!((0.0..=1.0).contains(&emp.service));
        prop_assert!(pi.mse == 0.0);
    }
}
