//! One-warehouse multi-retailer inventory routing: instance data, the
//! observable state, joint routing/replenishment plans and the cost of a
//! transition.
//!
//! Retailers are indexed `0..n_retailers`. In coordinate and distance
//! matrices node `0` is the warehouse and retailer `i` is node `i + 1`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INSTANCE_FORMAT: &str = "scpo-instance-v1";

/// Absolute tolerance used when checking capacities and flow identities.
pub const FEAS_TOL: f64 = 1e-6;

/// Geometry, fleet, cost and horizon parameters of one system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub n_retailers: usize,
    /// `[x, y]` per node; node 0 is the warehouse.
    pub coords: Vec<[f64; 2]>,
    pub n_vehicles: usize,
    pub vehicle_capacity: f64,
    pub inv_capacity: f64,
    pub holding_cost: f64,
    pub backorder_cost: f64,
    pub transport_scale: f64,
    pub history_len: usize,
    pub lookahead: usize,
    pub eval_horizon: usize,
    pub rng_seed: u64,
    /// Starting inventory per retailer; defaults to half the inventory capacity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_inventory: Option<Vec<f64>>,
    /// Indices of the dataset series backing each retailer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retailer_ids: Option<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct InstanceFile {
    format: String,
    #[serde(flatten)]
    instance: Instance,
}

impl Instance {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidInstance(msg));
        if self.n_retailers == 0 {
            return fail("n_retailers must be at least 1".into());
        }
        if self.coords.len() != self.n_retailers + 1 {
            return fail(format!(
                "expected {} coordinates (warehouse + retailers), found {}",
                self.n_retailers + 1,
                self.coords.len()
            ));
        }
        if self.n_vehicles == 0 {
            return fail("n_vehicles must be at least 1".into());
        }
        if !(self.vehicle_capacity > 0.0) || !(self.inv_capacity > 0.0) {
            return fail("vehicle_capacity and inv_capacity must be positive".into());
        }
        for (name, v) in [
            ("holding_cost", self.holding_cost),
            ("backorder_cost", self.backorder_cost),
            ("transport_scale", self.transport_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return fail(format!("{name} must be finite and nonnegative"));
            }
        }
        if self.lookahead == 0 || self.history_len < self.lookahead {
            return fail(format!(
                "need history_len >= lookahead >= 1, got L = {}, lookahead = {}",
                self.history_len, self.lookahead
            ));
        }
        if let Some(init) = &self.initial_inventory {
            if init.len() != self.n_retailers {
                return fail("initial_inventory length differs from n_retailers".into());
            }
            if init.iter().any(|&v| v > self.inv_capacity + FEAS_TOL || !v.is_finite()) {
                return fail("initial_inventory exceeds inv_capacity".into());
            }
        }
        if let Some(ids) = &self.retailer_ids {
            if ids.len() != self.n_retailers {
                return fail("retailer_ids length differs from n_retailers".into());
            }
        }
        Ok(())
    }

    pub fn initial_inventories(&self) -> Vec<f64> {
        match &self.initial_inventory {
            Some(v) => v.clone(),
            None => vec![self.inv_capacity / 2.0; self.n_retailers],
        }
    }

    /// Unscaled Euclidean distances between all nodes.
    pub fn distances(&self) -> DistMatrix {
        DistMatrix::euclidean(&self.coords)
    }

    /// Edge costs `transport_scale * euclid(i, j)`.
    pub fn edge_costs(&self) -> DistMatrix {
        self.distances().scaled(self.transport_scale)
    }

    /// Big-M linking deliveries to visits.
    pub fn big_m(&self) -> f64 {
        self.vehicle_capacity.min(self.inv_capacity)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = InstanceFile { format: INSTANCE_FORMAT.to_string(), instance: self.clone() };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: InstanceFile = serde_json::from_str(text)?;
        if file.format != INSTANCE_FORMAT {
            return Err(Error::Format { expected: INSTANCE_FORMAT.into(), found: file.format });
        }
        file.instance.validate()?;
        Ok(file.instance)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

/// Dense symmetric node-to-node matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DistMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistMatrix {
    pub fn euclidean(coords: &[[f64; 2]]) -> Self {
        let n = coords.len();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let dx = coords[i][0] - coords[j][0];
                let dy = coords[i][1] - coords[j][1];
                data[i * n + j] = dx.hypot(dy);
            }
        }
        DistMatrix { n, data }
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = f(i, j);
            }
        }
        DistMatrix { n, data }
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.data.iter_mut().for_each(|d| *d *= factor);
        self
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Length of the closed tour `0 -> nodes... -> 0`.
    pub fn tour_length(&self, nodes: &[usize]) -> f64 {
        let mut prev = 0;
        let mut total = 0.0;
        for &n in nodes {
            total += self.get(prev, n);
            prev = n;
        }
        if nodes.is_empty() {
            0.0
        } else {
            total + self.get(prev, 0)
        }
    }
}

/// Pre-decision system state at one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub epoch: usize,
    /// Inventory per retailer; negative values are backorders.
    pub inventories: Vec<f64>,
    /// Last `L` realised demands per retailer, oldest first.
    pub history: Vec<Vec<f64>>,
}

impl State {
    pub fn new(inst: &Instance, inventories: Vec<f64>, history: Vec<Vec<f64>>) -> Result<Self> {
        if inventories.len() != inst.n_retailers || history.len() != inst.n_retailers {
            return Err(Error::Shape(format!(
                "state needs {} retailers, got {} inventories and {} histories",
                inst.n_retailers,
                inventories.len(),
                history.len()
            )));
        }
        if let Some(i) = inventories.iter().position(|&v| v > inst.inv_capacity + FEAS_TOL) {
            return Err(Error::InvalidInput(format!("retailer {i} inventory exceeds capacity")));
        }
        for (i, h) in history.iter().enumerate() {
            if h.len() != inst.history_len {
                return Err(Error::Shape(format!(
                    "retailer {i} history has {} entries, expected {}",
                    h.len(),
                    inst.history_len
                )));
            }
            if h.iter().any(|&d| !(d >= 0.0)) {
                return Err(Error::InvalidInput(format!("retailer {i} history has negative demand")));
            }
        }
        Ok(State { epoch: 0, inventories, history })
    }
}

/// One epoch's routing and replenishment decision.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    /// Ordered retailer sequence per vehicle; may be empty.
    pub routes: Vec<Vec<usize>>,
    /// Delivery quantity per retailer.
    pub deliveries: Vec<f64>,
}

impl Plan {
    /// The no-op plan: every vehicle idle, nothing delivered.
    pub fn empty(inst: &Instance) -> Self {
        Plan { routes: vec![Vec::new(); inst.n_vehicles], deliveries: vec![0.0; inst.n_retailers] }
    }

    pub fn visited(&self) -> impl Iterator<Item = usize> + '_ {
        self.routes.iter().flatten().copied()
    }
}

/// A reason a plan is not in the feasible decision set.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Dimensions(String),
    UnknownRetailer(usize),
    DuplicateVisit(usize),
    NegativeDelivery(usize),
    DeliveryWithoutVisit(usize),
    VehicleCapacity { vehicle: usize, load: f64 },
    InventoryCapacity { retailer: usize, level: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Dimensions(msg) => write!(f, "dimension mismatch: {msg}"),
            Violation::UnknownRetailer(i) => write!(f, "unknown retailer {i}"),
            Violation::DuplicateVisit(i) => write!(f, "duplicate visit to retailer {i}"),
            Violation::NegativeDelivery(i) => write!(f, "negative delivery to retailer {i}"),
            Violation::DeliveryWithoutVisit(i) => {
                write!(f, "delivery to unvisited retailer {i}")
            }
            Violation::VehicleCapacity { vehicle, load } => {
                write!(f, "vehicle capacity exceeded by vehicle {vehicle} (load {load})")
            }
            Violation::InventoryCapacity { retailer, level } => {
                write!(f, "inventory capacity exceeded at retailer {retailer} (level {level})")
            }
        }
    }
}

/// Outcome of [`validate_plan`].
#[derive(Clone, Debug, PartialEq)]
pub struct PlanCheck {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

/// Checks a plan against the decision set of `state`.
pub fn validate_plan(state: &State, plan: &Plan, inst: &Instance) -> PlanCheck {
    let mut violations = Vec::new();
    let n = inst.n_retailers;
    if plan.routes.len() > inst.n_vehicles {
        violations.push(Violation::Dimensions(format!(
            "{} routes for {} vehicles",
            plan.routes.len(),
            inst.n_vehicles
        )));
    }
    if plan.deliveries.len() != n || state.inventories.len() != n {
        violations.push(Violation::Dimensions(format!(
            "{} deliveries and {} inventories for {n} retailers",
            plan.deliveries.len(),
            state.inventories.len()
        )));
        return PlanCheck { valid: false, violations };
    }
    let mut visited = vec![false; n];
    for (v, route) in plan.routes.iter().enumerate() {
        let mut load = 0.0;
        for &i in route {
            if i >= n {
                violations.push(Violation::UnknownRetailer(i));
                continue;
            }
            if visited[i] {
                violations.push(Violation::DuplicateVisit(i));
            }
            visited[i] = true;
            load += plan.deliveries[i];
        }
        if load > inst.vehicle_capacity + FEAS_TOL {
            violations.push(Violation::VehicleCapacity { vehicle: v, load });
        }
    }
    for i in 0..n {
        let u = plan.deliveries[i];
        if u < -FEAS_TOL || !u.is_finite() {
            violations.push(Violation::NegativeDelivery(i));
        }
        if !visited[i] && u > FEAS_TOL {
            violations.push(Violation::DeliveryWithoutVisit(i));
        }
        let level = state.inventories[i] + u;
        if level > inst.inv_capacity + FEAS_TOL {
            violations.push(Violation::InventoryCapacity { retailer: i, level });
        }
    }
    PlanCheck { valid: violations.is_empty(), violations }
}

/// Transportation, holding and backorder cost of one transition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub transport: f64,
    pub holding: f64,
    pub backorder: f64,
    pub total: f64,
}

impl CostBreakdown {
    pub fn new(transport: f64, holding: f64, backorder: f64) -> Self {
        CostBreakdown { transport, holding, backorder, total: transport + holding + backorder }
    }
}

impl std::ops::Add for CostBreakdown {
    type Output = CostBreakdown;
    fn add(self, o: CostBreakdown) -> CostBreakdown {
        CostBreakdown::new(
            self.transport + o.transport,
            self.holding + o.holding,
            self.backorder + o.backorder,
        )
    }
}

impl std::iter::Sum for CostBreakdown {
    fn sum<I: Iterator<Item = CostBreakdown>>(iter: I) -> Self {
        iter.fold(CostBreakdown::default(), |a, b| a + b)
    }
}

/// `transport_scale` times the summed closed-tour length of every route,
/// in stored visit order.
pub fn transport_cost(plan: &Plan, inst: &Instance) -> f64 {
    let dist = inst.distances();
    let total: f64 = plan
        .routes
        .iter()
        .map(|r| dist.tour_length(&r.iter().map(|&i| i + 1).collect::<Vec<_>>()))
        .sum();
    inst.transport_scale * total
}

/// Holding and backorder components for post-decision stock `post_inv`
/// facing `demand`.
pub fn inventory_cost_split(post_inv: &[f64], demand: &[f64], inst: &Instance) -> (f64, f64) {
    let mut holding = 0.0;
    let mut backorder = 0.0;
    for (&p, &d) in post_inv.iter().zip(demand) {
        let end = p - d;
        holding += inst.holding_cost * end.max(0.0);
        backorder -= inst.backorder_cost * end.min(0.0);
    }
    (holding, backorder)
}

/// `sum_i h * (post_i - d_i)^+ + e * (post_i - d_i)^-`.
pub fn inventory_cost(post_inv: &[f64], demand: &[f64], inst: &Instance) -> f64 {
    let (h, b) = inventory_cost_split(post_inv, demand, inst);
    h + b
}

/// Applies `plan`, then the realised demand; returns the next state and the
/// epoch's cost.
pub fn transition(
    state: &State,
    plan: &Plan,
    realized_demand: &[f64],
    inst: &Instance,
) -> Result<(State, CostBreakdown)> {
    let n = inst.n_retailers;
    if realized_demand.len() != n || plan.deliveries.len() != n {
        return Err(Error::Shape(format!(
            "transition needs {n} demands and deliveries, got {} and {}",
            realized_demand.len(),
            plan.deliveries.len()
        )));
    }
    if let Some(i) = realized_demand.iter().position(|&d| !(d >= 0.0)) {
        return Err(Error::InvalidInput(format!("negative realised demand at retailer {i}")));
    }
    let post: Vec<f64> =
        state.inventories.iter().zip(&plan.deliveries).map(|(&i, &u)| i + u).collect();
    let (holding, backorder) = inventory_cost_split(&post, realized_demand, inst);
    let transport = transport_cost(plan, inst);
    let inventories = post.iter().zip(realized_demand).map(|(&p, &d)| p - d).collect();
    let history = state
        .history
        .iter()
        .zip(realized_demand)
        .map(|(h, &d)| {
            let mut next = Vec::with_capacity(h.len());
            next.extend_from_slice(&h[1.min(h.len())..]);
            next.push(d);
            next
        })
        .collect();
    Ok((
        State { epoch: state.epoch + 1, inventories, history },
        CostBreakdown::new(transport, holding, backorder),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_instance(n: usize) -> Instance {
        let mut coords = vec![[0.0, 0.0]];
        for i in 0..n {
            coords.push([(i + 1) as f64, 0.0]);
        }
        Instance {
            n_retailers: n,
            coords,
            n_vehicles: 1,
            vehicle_capacity: 8.0,
            inv_capacity: 20.0,
            holding_cost: 0.3,
            backorder_cost: 3.0,
            transport_scale: 0.05,
            history_len: 3,
            lookahead: 2,
            eval_horizon: 5,
            rng_seed: 1,
            initial_inventory: None,
            retailer_ids: None,
        }
    }

    fn state(inst: &Instance, inv: Vec<f64>) -> State {
        let h = vec![vec![1.0; inst.history_len]; inst.n_retailers];
        State::new(inst, inv, h).unwrap()
    }

    #[test]
    fn empty_plan_is_valid() {
        let inst = toy_instance(2);
        let s = state(&inst, vec![0.0, 0.0]);
        assert!(validate_plan(&s, &Plan::empty(&inst), &inst).valid);
    }

    #[test]
    fn duplicate_visit_is_reported() {
        let mut inst = toy_instance(2);
        inst.n_vehicles = 2;
        let s = state(&inst, vec![0.0, 0.0]);
        let plan = Plan { routes: vec![vec![1], vec![1, 0]], deliveries: vec![0.0, 1.0] };
        let check = validate_plan(&s, &plan, &inst);
        assert!(!check.valid);
        assert!(check.violations.contains(&Violation::DuplicateVisit(1)));
        assert!(check.violations[0].to_string().contains("duplicate visit"));
    }

    #[test]
    fn vehicle_capacity_is_reported() {
        let inst = toy_instance(2);
        let s = state(&inst, vec![0.0, 0.0]);
        let plan = Plan { routes: vec![vec![0, 1]], deliveries: vec![5.0, 5.0] };
        let check = validate_plan(&s, &plan, &inst);
        assert!(!check.valid);
        assert!(check.violations.iter().any(|v| v.to_string().contains("vehicle capacity")));
    }

    #[test]
    fn delivery_without_visit_and_inventory_cap() {
        let inst = toy_instance(2);
        let s = state(&inst, vec![18.0, 0.0]);
        let plan = Plan { routes: vec![vec![0]], deliveries: vec![3.0, 1.0] };
        let check = validate_plan(&s, &plan, &inst);
        assert!(check.violations.contains(&Violation::DeliveryWithoutVisit(1)));
        assert!(check
            .violations
            .iter()
            .any(|v| matches!(v, Violation::InventoryCapacity { retailer: 0, .. })));
    }

    #[test]
    fn transport_cost_examples() {
        let inst = toy_instance(1);
        assert_eq!(transport_cost(&Plan::empty(&inst), &inst), 0.0);
        let plan = Plan { routes: vec![vec![0]], deliveries: vec![0.0] };
        assert!((transport_cost(&plan, &inst) - 0.1).abs() < 1e-12);

        let mut tri = toy_instance(2);
        tri.coords = vec![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        tri.transport_scale = 1.0;
        let plan = Plan { routes: vec![vec![0, 1]], deliveries: vec![0.0, 0.0] };
        assert!((transport_cost(&plan, &tri) - (2.0 + 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn inventory_cost_examples() {
        let inst = toy_instance(1);
        assert!((inventory_cost(&[5.0], &[3.0], &inst) - 0.6).abs() < 1e-12);
        assert!((inventory_cost(&[5.0], &[7.0], &inst) - 6.0).abs() < 1e-12);
        assert_eq!(inventory_cost(&[4.0], &[4.0], &inst), 0.0);
    }

    #[test]
    fn transition_examples() {
        let inst = toy_instance(1);
        let s = state(&inst, vec![0.0]);
        let plan = Plan { routes: vec![vec![0]], deliveries: vec![4.0] };
        let (next, cost) = transition(&s, &plan, &[4.0], &inst).unwrap();
        assert_eq!(next.inventories, vec![0.0]);
        assert_eq!(cost.backorder, 0.0);

        let s = state(&inst, vec![2.0]);
        let (next, cost) = transition(&s, &Plan::empty(&inst), &[5.0], &inst).unwrap();
        assert_eq!(next.inventories, vec![-3.0]);
        assert!((cost.backorder - 3.0 * inst.backorder_cost).abs() < 1e-12);
        assert_eq!(cost.total, cost.transport + cost.holding + cost.backorder);
    }

    #[test]
    fn history_window_shifts() {
        let inst = toy_instance(1);
        let s = State::new(&inst, vec![0.0], vec![vec![1.0, 2.0, 3.0]]).unwrap();
        let (next, _) = transition(&s, &Plan::empty(&inst), &[4.0], &inst).unwrap();
        assert_eq!(next.history, vec![vec![2.0, 3.0, 4.0]]);
        assert_eq!(next.epoch, 1);
    }

    #[test]
    fn negative_demand_rejected() {
        let inst = toy_instance(1);
        let s = state(&inst, vec![0.0]);
        assert!(transition(&s, &Plan::empty(&inst), &[-1.0], &inst).is_err());
    }

    #[test]
    fn instance_json_round_trip_and_format_tag() {
        let inst = toy_instance(3);
        let text = inst.to_json().unwrap();
        assert!(text.contains("\"format\": \"scpo-instance-v1\""));
        assert_eq!(Instance::from_json(&text).unwrap(), inst);
        let bad = text.replace("scpo-instance-v1", "scpo-instance-v0");
        assert!(matches!(Instance::from_json(&bad), Err(Error::Format { .. })));
    }

    #[test]
    fn instance_invariants() {
        let mut inst = toy_instance(2);
        inst.history_len = 1;
        assert!(inst.validate().is_err());
        let mut inst = toy_instance(2);
        inst.n_vehicles = 0;
        assert!(inst.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn flow_conservation(inv in -20.0f64..20.0, u in 0.0f64..10.0, d in 0.0f64..30.0) {
                let inst = toy_instance(1);
                let inv = inv.min(inst.inv_capacity);
                let s = state(&inst, vec![inv]);
                let plan = Plan { routes: vec![vec![0]], deliveries: vec![u] };
                let (next, cost) = transition(&s, &plan, &[d], &inst).unwrap();
                prop_assert!((next.inventories[0] - (inv + u - d)).abs() <= 1e-9);
                prop_assert!(cost.holding >= 0.0 && cost.backorder >= 0.0);
                prop_assert!((cost.total - cost.transport - cost.holding - cost.backorder).abs() < 1e-12);
            }
        }
    }
}
