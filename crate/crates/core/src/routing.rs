//! TSP and CVRP sub-solvers over a symmetric distance matrix whose node 0 is
//! the warehouse. Tours store only customer nodes; the warehouse is implicit
//! at both ends.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DistMatrix;

/// Largest node count solved exactly by Held-Karp.
pub const HELD_KARP_MAX: usize = 13;

const EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tour {
    pub nodes: Vec<usize>,
    pub length: f64,
}

impl Tour {
    pub fn new(nodes: Vec<usize>, dist: &DistMatrix) -> Self {
        let length = dist.tour_length(&nodes);
        Tour { nodes, length }
    }

    pub fn empty() -> Self {
        Tour { nodes: Vec::new(), length: 0.0 }
    }
}

/// Shortest closed tour through `nodes` starting and ending at node 0.
pub fn tsp_solve(nodes: &[usize], dist: &DistMatrix) -> Tour {
    match nodes.len() {
        0 => Tour::empty(),
        // One or two customers admit a single cycle up to reversal.
        1 | 2 => Tour::new(nodes.to_vec(), dist),
        n if n <= HELD_KARP_MAX => held_karp(nodes, dist),
        _ => {
            let mut seq = nearest_neighbor(nodes, dist);
            two_opt(&mut seq, dist);
            Tour::new(seq, dist)
        }
    }
}

/// Exact dynamic program over subsets; `nodes.len()` must be at most
/// [`HELD_KARP_MAX`].
pub fn held_karp(nodes: &[usize], dist: &DistMatrix) -> Tour {
    let n = nodes.len();
    assert!(n <= HELD_KARP_MAX, "held_karp limited to {HELD_KARP_MAX} nodes");
    if n == 0 {
        return Tour::empty();
    }
    let full = 1usize << n;
    let mut cost = vec![f64::INFINITY; full * n];
    let mut parent = vec![usize::MAX; full * n];
    for j in 0..n {
        cost[(1 << j) * n + j] = dist.get(0, nodes[j]);
    }
    for mask in 1..full {
        for j in 0..n {
            if mask & (1 << j) == 0 {
                continue;
            }
            let c = cost[mask * n + j];
            if !c.is_finite() {
                continue;
            }
            for k in 0..n {
                if mask & (1 << k) != 0 {
                    continue;
                }
                let next = mask | (1 << k);
                let cand = c + dist.get(nodes[j], nodes[k]);
                if cand < cost[next * n + k] - EPS {
                    cost[next * n + k] = cand;
                    parent[next * n + k] = j;
                }
            }
        }
    }
    let last_mask = full - 1;
    let (mut end, mut best) = (0, f64::INFINITY);
    for j in 0..n {
        let c = cost[last_mask * n + j] + dist.get(nodes[j], 0);
        if c < best - EPS {
            best = c;
            end = j;
        }
    }
    let mut order = Vec::with_capacity(n);
    let mut mask = last_mask;
    let mut j = end;
    while j != usize::MAX {
        order.push(nodes[j]);
        let p = parent[mask * n + j];
        mask &= !(1 << j);
        j = p;
    }
    order.reverse();
    Tour::new(order, dist)
}

fn nearest_neighbor(nodes: &[usize], dist: &DistMatrix) -> Vec<usize> {
    let mut left: Vec<usize> = nodes.to_vec();
    let mut seq = Vec::with_capacity(nodes.len());
    let mut cur = 0;
    while !left.is_empty() {
        let (pos, _) = left
            .iter()
            .enumerate()
            .map(|(p, &v)| (p, dist.get(cur, v)))
            .fold((0, f64::INFINITY), |b, x| if x.1 < b.1 { x } else { b });
        cur = left.remove(pos);
        seq.push(cur);
    }
    seq
}

/// Improves `seq` (customers only) by 2-opt moves until no move shortens the
/// closed tour. Returns the final length.
pub fn two_opt(seq: &mut [usize], dist: &DistMatrix) -> f64 {
    let n = seq.len();
    let at = |s: &[usize], p: usize| if p == 0 || p == n + 1 { 0 } else { s[p - 1] };
    loop {
        let mut improved = false;
        // Positions 1..=n index the customers inside the padded tour [0, seq.., 0].
        for i in 1..n {
            for j in i + 1..=n {
                let a = at(seq, i - 1);
                let b = at(seq, i);
                let c = at(seq, j);
                let d = at(seq, j + 1);
                let delta = dist.get(a, c) + dist.get(b, d) - dist.get(a, b) - dist.get(c, d);
                if delta < -EPS {
                    seq[i - 1..j].reverse();
                    improved = true;
                }
            }
        }
        if !improved {
            return dist.tour_length(seq);
        }
    }
}

/// Cheapest insertion of `node` into `tour`: `(position, added distance)`,
/// where `position` is the index in `tour.nodes` the node would occupy.
pub fn insertion_cost(tour: &[usize], node: usize, dist: &DistMatrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for pos in 0..=tour.len() {
        let prev = if pos == 0 { 0 } else { tour[pos - 1] };
        let next = if pos == tour.len() { 0 } else { tour[pos] };
        let delta = dist.get(prev, node) + dist.get(node, next) - dist.get(prev, next);
        if delta < best.1 - EPS {
            best = (pos, delta);
        }
    }
    best
}

/// Distance saved by splicing `node` out of `tour`; 0 if absent.
pub fn removal_gain(tour: &[usize], node: usize, dist: &DistMatrix) -> f64 {
    match tour.iter().position(|&v| v == node) {
        None => 0.0,
        Some(p) => {
            let prev = if p == 0 { 0 } else { tour[p - 1] };
            let next = if p + 1 == tour.len() { 0 } else { tour[p + 1] };
            dist.get(prev, node) + dist.get(node, next) - dist.get(prev, next)
        }
    }
}

/// Capacitated routing of `nodes` (with `demands[k]` for `nodes[k]`) on at
/// most `vehicles` routes of capacity `capacity`. Empty routes are dropped.
pub fn cvrp_solve(
    nodes: &[usize],
    demands: &[f64],
    capacity: f64,
    vehicles: usize,
    dist: &DistMatrix,
) -> Result<Vec<Tour>> {
    if nodes.len() != demands.len() {
        return Err(Error::Shape("cvrp: nodes and demands differ in length".into()));
    }
    if nodes.is_empty() {
        return Ok(Vec::new());
    }
    let total: f64 = demands.iter().sum();
    if total > vehicles as f64 * capacity + 1e-6 {
        return Err(Error::Infeasible(format!(
            "total demand {total} exceeds fleet capacity {}",
            vehicles as f64 * capacity
        )));
    }
    if let Some(k) = demands.iter().position(|&d| d > capacity + 1e-6) {
        return Err(Error::Infeasible(format!("node {} demand exceeds capacity", nodes[k])));
    }
    let dem = |v: usize| demands[nodes.iter().position(|&x| x == v).unwrap()];
    if total <= capacity + 1e-6 {
        return Ok(vec![tsp_solve(nodes, dist)]);
    }

    let mut routes = clarke_wright(nodes, demands, capacity, dist);
    local_search(&mut routes, &dem, capacity, dist);
    while routes.len() > vehicles {
        if !merge_cheapest(&mut routes, &dem, capacity, dist) {
            routes = first_fit_decreasing(nodes, demands, capacity, vehicles).ok_or_else(|| {
                Error::Infeasible(format!("cannot pack demands into {vehicles} routes"))
            })?;
            local_search(&mut routes, &dem, capacity, dist);
            break;
        }
        local_search(&mut routes, &dem, capacity, dist);
    }
    routes.retain(|r| !r.is_empty());
    Ok(routes.into_iter().map(|r| tsp_solve(&r, dist)).collect())
}

fn load(route: &[usize], dem: &impl Fn(usize) -> f64) -> f64 {
    route.iter().map(|&v| dem(v)).sum()
}

fn clarke_wright(nodes: &[usize], demands: &[f64], cap: f64, dist: &DistMatrix) -> Vec<Vec<usize>> {
    let n = nodes.len();
    let mut route_of: Vec<usize> = (0..n).collect();
    let mut routes: Vec<Vec<usize>> = (0..n).map(|k| vec![k]).collect();
    let mut loads: Vec<f64> = demands.to_vec();
    let mut savings = Vec::with_capacity(n * (n - 1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            let (i, j) = (nodes[a], nodes[b]);
            savings.push((dist.get(0, i) + dist.get(0, j) - dist.get(i, j), a, b));
        }
    }
    savings.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    for (s, a, b) in savings {
        if s <= EPS {
            break;
        }
        let (ra, rb) = (route_of[a], route_of[b]);
        if ra == rb || loads[ra] + loads[rb] > cap + 1e-6 {
            continue;
        }
        let mut left = std::mem::take(&mut routes[ra]);
        let mut right = std::mem::take(&mut routes[rb]);
        // a must sit at the tail of `left` and b at the head of `right`.
        if left.last() != Some(&a) {
            if left.first() == Some(&a) {
                left.reverse();
            } else {
                routes[ra] = left;
                routes[rb] = right;
                continue;
            }
        }
        if right.first() != Some(&b) {
            if right.last() == Some(&b) {
                right.reverse();
            } else {
                routes[ra] = left;
                routes[rb] = right;
                continue;
            }
        }
        for &k in &right {
            route_of[k] = ra;
        }
        left.extend(right);
        routes[ra] = left;
        loads[ra] += loads[rb];
        loads[rb] = 0.0;
    }
    routes
        .into_iter()
        .filter(|r| !r.is_empty())
        .map(|r| r.into_iter().map(|k| nodes[k]).collect())
        .collect()
}

fn route_len(r: &[usize], dist: &DistMatrix) -> f64 {
    dist.tour_length(r)
}

/// Relocate, swap and intra-route 2-opt until no improving move remains.
fn local_search(
    routes: &mut [Vec<usize>],
    dem: &impl Fn(usize) -> f64,
    cap: f64,
    dist: &DistMatrix,
) {
    for r in routes.iter_mut() {
        two_opt(r, dist);
    }
    let mut rounds = 0;
    loop {
        rounds += 1;
        let mut improved = false;
        let m = routes.len();
        // Relocate.
        for a in 0..m {
            let mut p = 0;
            while p < routes[a].len() {
                let node = routes[a][p];
                let gain = removal_gain(&routes[a], node, dist);
                let mut best: Option<(usize, usize, f64)> = None;
                for b in 0..m {
                    if b == a || load(&routes[b], dem) + dem(node) > cap + 1e-6 {
                        continue;
                    }
                    let (pos, add) = insertion_cost(&routes[b], node, dist);
                    if add - gain < -EPS && best.map_or(true, |x| add - gain < x.2) {
                        best = Some((b, pos, add - gain));
                    }
                }
                if let Some((b, pos, _)) = best {
                    routes[a].remove(p);
                    routes[b].insert(pos, node);
                    improved = true;
                } else {
                    p += 1;
                }
            }
        }
        // Swap.
        for a in 0..m {
            for b in a + 1..m {
                let la = load(&routes[a], dem);
                let lb = load(&routes[b], dem);
                let base = route_len(&routes[a], dist) + route_len(&routes[b], dist);
                'outer: for p in 0..routes[a].len() {
                    for q in 0..routes[b].len() {
                        let (x, y) = (routes[a][p], routes[b][q]);
                        if la - dem(x) + dem(y) > cap + 1e-6 || lb - dem(y) + dem(x) > cap + 1e-6 {
                            continue;
                        }
                        routes[a][p] = y;
                        routes[b][q] = x;
                        let after = route_len(&routes[a], dist) + route_len(&routes[b], dist);
                        if after < base - EPS {
                            improved = true;
                            break 'outer;
                        }
                        routes[a][p] = x;
                        routes[b][q] = y;
                    }
                }
            }
        }
        for r in routes.iter_mut() {
            let before = route_len(r, dist);
            if two_opt(r, dist) < before - EPS {
                improved = true;
            }
        }
        if !improved || rounds > 1000 {
            return;
        }
    }
}

/// Merges the feasible pair with the smallest length increase.
fn merge_cheapest(
    routes: &mut Vec<Vec<usize>>,
    dem: &impl Fn(usize) -> f64,
    cap: f64,
    dist: &DistMatrix,
) -> bool {
    let mut best: Option<(usize, usize, Vec<usize>, f64)> = None;
    for a in 0..routes.len() {
        for b in a + 1..routes.len() {
            if load(&routes[a], dem) + load(&routes[b], dem) > cap + 1e-6 {
                continue;
            }
            let mut joined = routes[a].clone();
            joined.extend_from_slice(&routes[b]);
            let tour = tsp_solve(&joined, dist);
            let delta = tour.length - route_len(&routes[a], dist) - route_len(&routes[b], dist);
            if best.as_ref().map_or(true, |x| delta < x.3 - EPS) {
                best = Some((a, b, tour.nodes, delta));
            }
        }
    }
    match best {
        None => false,
        Some((a, b, joined, _)) => {
            routes[a] = joined;
            routes.remove(b);
            true
        }
    }
}

fn first_fit_decreasing(
    nodes: &[usize],
    demands: &[f64],
    cap: f64,
    vehicles: usize,
) -> Option<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.sort_by(|&a, &b| demands[b].total_cmp(&demands[a]).then(a.cmp(&b)));
    let mut bins: Vec<(f64, Vec<usize>)> = vec![(0.0, Vec::new()); vehicles];
    for k in order {
        let slot = bins.iter_mut().find(|b| b.0 + demands[k] <= cap + 1e-6)?;
        slot.0 += demands[k];
        slot.1.push(nodes[k]);
    }
    Some(bins.into_iter().map(|b| b.1).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};

    fn random_dist(n: usize, seed: u64) -> DistMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<[f64; 2]> =
            (0..=n).map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)]).collect();
        DistMatrix::euclidean(&coords)
    }

    fn brute_force(nodes: &[usize], dist: &DistMatrix) -> f64 {
        fn rec(rest: &mut Vec<usize>, seq: &mut Vec<usize>, dist: &DistMatrix, best: &mut f64) {
            if rest.is_empty() {
                *best = best.min(dist.tour_length(seq));
                return;
            }
            for k in 0..rest.len() {
                let v = rest.remove(k);
                seq.push(v);
                rec(rest, seq, dist, best);
                seq.pop();
                rest.insert(k, v);
            }
        }
        let mut best = f64::INFINITY;
        rec(&mut nodes.to_vec(), &mut Vec::new(), dist, &mut best);
        if nodes.is_empty() {
            0.0
        } else {
            best
        }
    }

    #[test]
    fn empty_tour() {
        let d = random_dist(3, 1);
        assert_eq!(tsp_solve(&[], &d).length, 0.0);
    }

    #[test]
    fn right_triangle() {
        let d = DistMatrix::euclidean(&[[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]]);
        let t = tsp_solve(&[1, 2], &d);
        assert!((t.length - (2.0 + 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn held_karp_matches_permutations() {
        for seed in 0..30 {
            let n = 1 + (seed as usize % 8);
            let d = random_dist(n, seed);
            let nodes: Vec<usize> = (1..=n).collect();
            let hk = tsp_solve(&nodes, &d);
            assert!((hk.length - brute_force(&nodes, &d)).abs() < 1e-9, "seed {seed}");
            assert!((hk.length - d.tour_length(&hk.nodes)).abs() < 1e-9);
        }
    }

    #[test]
    fn heuristic_path_never_beats_held_karp() {
        for seed in 0..10 {
            let d = random_dist(10, seed);
            let nodes: Vec<usize> = (1..=10).collect();
            let mut seq = nearest_neighbor(&nodes, &d);
            let heur = two_opt(&mut seq, &d);
            assert!(held_karp(&nodes, &d).length <= heur + 1e-9);
        }
    }

    #[test]
    fn large_tsp_is_a_permutation() {
        let d = random_dist(30, 5);
        let nodes: Vec<usize> = (1..=30).collect();
        let t = tsp_solve(&nodes, &d);
        let mut sorted = t.nodes.clone();
        sorted.sort();
        assert_eq!(sorted, nodes);
    }

    #[test]
    fn insertion_and_removal() {
        let d = DistMatrix::euclidean(&[[0.0, 0.0], [3.0, 4.0], [6.0, 8.0]]);
        assert_eq!(insertion_cost(&[], 1, &d), (0, 10.0));
        assert_eq!(removal_gain(&[1], 1, &d), 10.0);
        let base = d.tour_length(&[2]);
        let (pos, add) = insertion_cost(&[2], 1, &d);
        let mut t = vec![2];
        t.insert(pos, 1);
        assert!((d.tour_length(&t) - base - add).abs() < 1e-12);
        assert!((d.tour_length(&t) - removal_gain(&t, 1, &d) - base).abs() < 1e-12);
    }

    #[test]
    fn cvrp_uncapacitated_is_tsp() {
        let d = random_dist(6, 3);
        let nodes: Vec<usize> = (1..=6).collect();
        let tours = cvrp_solve(&nodes, &[1.0; 6], 10.0, 2, &d).unwrap();
        assert_eq!(tours.len(), 1);
        assert!((tours[0].length - tsp_solve(&nodes, &d).length).abs() < 1e-9);
    }

    #[test]
    fn cvrp_infeasible_fleet() {
        let d = random_dist(3, 3);
        assert!(matches!(
            cvrp_solve(&[1, 2, 3], &[5.0, 5.0, 5.0], 6.0, 2, &d),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn cvrp_two_clusters() {
        let coords = vec![
            [0.0, 0.0],
            [100.0, 1.0],
            [101.0, 0.0],
            [100.0, -1.0],
            [-100.0, 1.0],
            [-101.0, 0.0],
            [-100.0, -1.0],
        ];
        let d = DistMatrix::euclidean(&coords);
        let nodes: Vec<usize> = (1..=6).collect();
        let tours = cvrp_solve(&nodes, &[1.0; 6], 3.0, 2, &d).unwrap();
        // Oracle: best 2-partition into capacity-feasible halves, each routed optimally.
        let mut best = f64::INFINITY;
        for mask in 0u32..64 {
            let a: Vec<usize> = nodes.iter().copied().filter(|&v| mask & (1 << (v - 1)) != 0).collect();
            let b: Vec<usize> = nodes.iter().copied().filter(|&v| mask & (1 << (v - 1)) == 0).collect();
            if a.len() > 3 || b.len() > 3 {
                continue;
            }
            best = best.min(brute_force(&a, &d) + brute_force(&b, &d));
        }
        let total: f64 = tours.iter().map(|t| t.length).sum();
        assert_eq!(tours.len(), 2);
        assert!((total - best).abs() < 1e-9);
        for t in &tours {
            let mut s = t.nodes.clone();
            s.sort();
            assert!(s == vec![1, 2, 3] || s == vec![4, 5, 6]);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn two_opt_is_monotone(seed in 0u64..10_000, n in 2usize..20) {
                let d = random_dist(n, seed);
                let mut seq: Vec<usize> = (1..=n).collect();
                let before = d.tour_length(&seq);
                let after = two_opt(&mut seq, &d);
                prop_assert!(after <= before + 1e-9);
            }

            #[test]
            fn cvrp_respects_capacity(seed in 0u64..10_000, n in 1usize..12) {
                let d = random_dist(n, seed);
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let demands: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..4.0)).collect();
                let nodes: Vec<usize> = (1..=n).collect();
                let cap = 5.0;
                let vehicles = n;
                let tours = cvrp_solve(&nodes, &demands, cap, vehicles, &d).unwrap();
                prop_assert!(tours.len() <= vehicles);
                let mut seen: Vec<usize> = tours.iter().flat_map(|t| t.nodes.clone()).collect();
                seen.sort();
                prop_assert_eq!(seen, nodes.clone());
                for t in &tours {
                    let l: f64 = t.nodes.iter().map(|&v| demands[v - 1]).sum();
                    prop_assert!(l <= cap + 1e-6);
                }
            }
        }
    }
}
