//! Seeded fixtures shared by the benchmarks.

use rand::Rng;
use scpo_core::forecast::ScenarioSet;
use scpo_core::milp::{LinExpr, MilpModel, Sense};
use scpo_core::model::{DistMatrix, Instance};
use scpo_core::rng_from_seed;
use scpo_core::sirp::IrpProblem;

/// Multi-constraint knapsack with `n` binaries and `m` rows, as a
/// minimisation.
pub fn knapsack(n: usize, m: usize, seed: u64) -> MilpModel {
    let mut rng = rng_from_seed(seed);
    let mut model = MilpModel::new();
    let x: Vec<_> = (0..n).map(|j| model.binary(format!("x{j}"), -rng.random_range(1.0..10.0))).collect();
    for r in 0..m {
        let mut e = LinExpr::new();
        let mut total = 0.0;
        for &v in &x {
            let w = rng.random_range(1.0..10.0);
            total += w;
            e.add(v, w);
        }
        model.add_con(format!("cap{r}"), e, Sense::Le, 0.4 * total);
    }
    model
}

/// Depot at the origin plus `n` uniform points in a 100 x 100 square.
pub fn points(n: usize, seed: u64) -> DistMatrix {
    let mut rng = rng_from_seed(seed);
    let mut coords = vec![[0.0, 0.0]];
    coords.extend((0..n).map(|_| [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)]));
    DistMatrix::euclidean(&coords)
}

/// `n` retailers, two vehicles, `scenarios` demand matrices over `l` periods.
pub fn irp_problem(n: usize, l: usize, scenarios: usize, seed: u64) -> IrpProblem {
    let mut rng = rng_from_seed(seed);
    let mut coords = vec![[0.0, 0.0]];
    coords.extend((0..n).map(|_| [rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0)]));
    let inst = Instance {
        n_retailers: n,
        coords,
        n_vehicles: 2,
        vehicle_capacity: (1.5 * n as f64 * 10.0 / 2.0).ceil(),
        inv_capacity: 30.0,
        holding_cost: 0.3,
        backorder_cost: 3.0,
        transport_scale: 0.05,
        history_len: l.max(14),
        lookahead: l,
        eval_horizon: 30,
        rng_seed: seed,
        initial_inventory: None,
        retailer_ids: None,
    };
    let scen = (0..scenarios)
        .map(|_| (0..n).map(|_| (0..l).map(|_| rng.random_range(4.0..16.0)).collect()).collect())
        .collect();
    let inv = vec![15.0; n];
    IrpProblem::new(inst, inv, ScenarioSet::uniform(scen).expect("valid scenarios")).expect("valid problem")
}
