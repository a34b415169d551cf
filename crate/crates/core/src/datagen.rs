//! Synthetic demand series (trend, random, and their sum), retailer
//! geography, train/test splitting and k-means instance construction.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Instance;
use crate::{rng_from_seed, Rng};

pub const DATASET_FORMAT: &str = "scpo-dataset-v1";
/// Periods per series: one leap year.
pub const DEFAULT_T: usize = 366;
pub const TRAIN_FRACTION: f64 = 0.7;
/// 2020-01-01 is a Wednesday (Monday = 1).
const START_DOW: u32 = 3;
const START_YEAR: i32 = 2020;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Trend,
    Random,
    Both,
}

impl std::str::FromStr for Pattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "trend" => Ok(Pattern::Trend),
            "random" => Ok(Pattern::Random),
            "both" => Ok(Pattern::Both),
            _ => Err(Error::InvalidInput(format!("unknown pattern {s:?} (trend|random|both)"))),
        }
    }
}

impl std::fmt::Display for Pattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pattern::Trend => "trend",
            Pattern::Random => "random",
            Pattern::Both => "both",
        })
    }
}

/// How the seasonal term turns the calendar into an angle.
///
/// `Printed` evaluates `sin(2 pi / (doy / 366)) + sin(2 pi / (dow / 7))`;
/// `Conventional` evaluates `sin(2 pi doy / 366) + sin(2 pi dow / 7)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CycleForm {
    #[default]
    Printed,
    Conventional,
}

impl std::str::FromStr for CycleForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "printed" => Ok(CycleForm::Printed),
            "conventional" => Ok(CycleForm::Conventional),
            _ => Err(Error::InvalidInput(format!("unknown cycle form {s:?} (printed|conventional)"))),
        }
    }
}

/// Day-of-year (1..=366) and day-of-week (Monday = 1) per period.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Calendar {
    pub day_of_year: Vec<u32>,
    pub day_of_week: Vec<u32>,
}

fn is_leap(y: i32) -> bool {
    (y % 4 == 0 && y % 100 != 0) || y % 400 == 0
}

impl Calendar {
    /// `t` consecutive days from January 1 of a leap year.
    pub fn leap_year(t: usize) -> Self {
        let mut doy = Vec::with_capacity(t);
        let mut dow = Vec::with_capacity(t);
        let (mut year, mut d, mut w) = (START_YEAR, 1u32, START_DOW);
        for _ in 0..t {
            doy.push(d);
            dow.push(w);
            let len = if is_leap(year) { 366 } else { 365 };
            d += 1;
            if d > len {
                d = 1;
                year += 1;
            }
            w = w % 7 + 1;
        }
        Calendar { day_of_year: doy, day_of_week: dow }
    }

    /// Calendar features for period `k` past the end, extrapolated.
    pub fn features_at(&self, k: usize) -> (f64, f64) {
        if k < self.len() {
            (self.day_of_year[k] as f64 / 366.0, self.day_of_week[k] as f64 / 7.0)
        } else {
            let ext = Calendar::leap_year(k + 1);
            (ext.day_of_year[k] as f64 / 366.0, ext.day_of_week[k] as f64 / 7.0)
        }
    }

    pub fn len(&self) -> usize {
        self.day_of_year.len()
    }

    pub fn is_empty(&self) -> bool {
        self.day_of_year.is_empty()
    }
}

/// Parameters of one trend series.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrendParams {
    pub phi: f64,
    pub v0: f64,
}

impl TrendParams {
    pub fn sample(rng: &mut Rng) -> Self {
        TrendParams { phi: rng.random_range(0.995..1.01), v0: rng.random_range(5.0..7.0) }
    }
}

/// Parameters of one random series; `var` is the variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RandomParams {
    pub mu: f64,
    pub var: f64,
}

impl RandomParams {
    pub fn sample(rng: &mut Rng) -> Self {
        RandomParams { mu: rng.random_range(9.0..11.0), var: rng.random_range(2.0..4.0) }
    }
}

pub fn cycle(doy: u32, dow: u32, form: CycleForm) -> f64 {
    let tau = std::f64::consts::TAU;
    let (y, w) = (doy as f64, dow as f64);
    match form {
        CycleForm::Printed => (tau / (y / 366.0)).sin() + (tau / (w / 7.0)).sin(),
        CycleForm::Conventional => (tau * y / 366.0).sin() + (tau * w / 7.0).sin(),
    }
}

/// `max(0, v0 phi^k + cycle_k)` without clamping applied to intermediate
/// sums.
pub fn trend_series(p: TrendParams, cal: &Calendar, form: CycleForm) -> Vec<f64> {
    let mut v = p.v0;
    (0..cal.len())
        .map(|k| {
            if k > 0 {
                v *= p.phi;
            }
            (v + cycle(cal.day_of_year[k], cal.day_of_week[k], form)).max(0.0)
        })
        .collect()
}

pub fn random_series(p: RandomParams, t: usize, rng: &mut Rng) -> Vec<f64> {
    if p.var <= 0.0 {
        return vec![p.mu.max(0.0); t];
    }
    let dist = Normal::new(p.mu, p.var.sqrt()).expect("finite normal parameters");
    (0..t).map(|_| dist.sample(rng).max(0.0)).collect()
}

pub fn gen_trend(t: usize, seed: u64, form: CycleForm) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    trend_series(TrendParams::sample(&mut rng), &Calendar::leap_year(t), form)
}

pub fn gen_random(t: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    let p = RandomParams::sample(&mut rng);
    random_series(p, t, &mut rng)
}

/// Unclamped trend plus random parts, clamped once at the end.
pub fn gen_both(t: usize, seed: u64, form: CycleForm) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    let tp = TrendParams::sample(&mut rng);
    let rp = RandomParams::sample(&mut rng);
    let trend = trend_series(tp, &Calendar::leap_year(t), form);
    let random = random_series(rp, t, &mut rng);
    trend.iter().zip(&random).map(|(a, b)| (a + b).max(0.0)).collect()
}

pub fn gen_series(pattern: Pattern, t: usize, seed: u64, form: CycleForm) -> Vec<f64> {
    match pattern {
        Pattern::Trend => gen_trend(t, seed, form),
        Pattern::Random => gen_random(t, seed),
        Pattern::Both => gen_both(t, seed, form),
    }
}

/// Axis-aligned box for retailer locations, in latitude/longitude degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordsBox {
    pub lat: (f64, f64),
    pub lon: (f64, f64),
}

impl Default for CoordsBox {
    fn default() -> Self {
        CoordsBox { lat: (50.7, 53.4), lon: (3.5, 7.1) }
    }
}

impl CoordsBox {
    /// Uniform point in the box, projected equirectangularly to kilometres
    /// around the box's mean latitude.
    pub fn sample_km(&self, rng: &mut Rng) -> [f64; 2] {
        let lat = rng.random_range(self.lat.0..=self.lat.1);
        let lon = rng.random_range(self.lon.0..=self.lon.1);
        self.project(lat, lon)
    }

    pub fn project(&self, lat: f64, lon: f64) -> [f64; 2] {
        const KM_PER_DEG: f64 = 111.195;
        let mid = 0.5 * (self.lat.0 + self.lat.1);
        [lon * KM_PER_DEG * mid.to_radians().cos(), lat * KM_PER_DEG]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandDataset {
    pub pattern: Pattern,
    #[serde(default)]
    pub cycle_form: CycleForm,
    pub seed: u64,
    pub sequences: Vec<Vec<f64>>,
    pub calendar: Calendar,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Retailer positions in kilometres.
    pub coords: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    #[serde(flatten)]
    dataset: DemandDataset,
}

/// Randomly splits `0..n` into sorted train and test index sets with
/// `|train| = round(0.7 n)`.
pub fn split_indices(n: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_train = (TRAIN_FRACTION * n as f64).round() as usize;
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

impl DemandDataset {
    /// `n` series of length `t`, each from its own sub-seed.
    pub fn generate(pattern: Pattern, n: usize, t: usize, seed: u64, form: CycleForm, coords_box: CoordsBox) -> Result<Self> {
        if n == 0 || t == 0 {
            return Err(Error::InvalidInput("dataset needs at least one series and one period".into()));
        }
        let mut rng = rng_from_seed(seed);
        let seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();
        let sequences = seeds.iter().map(|&s| gen_series(pattern, t, s, form)).collect();
        let coords = (0..n).map(|_| coords_box.sample_km(&mut rng)).collect();
        let (train, test) = split_indices(n, &mut rng);
        Ok(DemandDataset {
            pattern,
            cycle_form: form,
            seed,
            sequences,
            calendar: Calendar::leap_year(t),
            train,
            test,
            coords,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.calendar.len()
    }

    /// Mean per-period demand over the training series.
    pub fn train_mean(&self) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for &i in &self.train {
            s += self.sequences[i].iter().sum::<f64>();
            n += self.sequences[i].len();
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.calendar.len();
        if self.calendar.day_of_week.len() != t {
            return Err(Error::InvalidInput("calendar arrays differ in length".into()));
        }
        if self.sequences.iter().any(|s| s.len() != t) {
            return Err(Error::InvalidInput("every series must span the calendar".into()));
        }
        if self.sequences.iter().flatten().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidInput("demand values must be nonnegative".into()));
        }
        if self.coords.len() != self.sequences.len() {
            return Err(Error::InvalidInput("one coordinate per series is required".into()));
        }
        let mut seen = vec![false; self.len()];
        for &i in self.train.iter().chain(&self.test) {
            if i >= self.len() || seen[i] {
                return Err(Error::InvalidInput("train/test indices overlap or are out of range".into()));
            }
            seen[i] = true;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&DatasetFile { format: DATASET_FORMAT.into(), dataset: self.clone() })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: DatasetFile = serde_json::from_str(text)?;
        if f.format != DATASET_FORMAT {
            return Err(Error::Format { expected: DATASET_FORMAT.into(), found: f.format });
        }
        f.dataset.validate()?;
        Ok(f.dataset)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Lloyd's k-means with k-means++ seeding.
#[derive(Clone, Debug)]
pub struct KMeans {
    pub centroids: Vec<[f64; 2]>,
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squares after each assignment step.
    pub wcss_history: Vec<f64>,
}

pub fn kmeans(points: &[[f64; 2]], k: usize, max_iter: usize, rng: &mut Rng) -> Result<KMeans> {
    if k == 0 || k > points.len() {
        return Err(Error::InvalidInput(format!("k = {k} for {} points", points.len())));
    }
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|&p| centroids.iter().map(|&c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut r = rng.random_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        };
        centroids.push(points[next]);
    }
    let nearest = |p: [f64; 2], cs: &[[f64; 2]]| {
        let mut best = (0, f64::INFINITY);
        for (c, &cc) in cs.iter().enumerate() {
            let d = sq_dist(p, cc);
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    };
    let mut assignment = vec![usize::MAX; points.len()];
    let mut wcss_history = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut wcss = 0.0;
        for (i, &p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            wcss += d;
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        wcss_history.push(wcss);
        if !changed {
            break;
        }
        let mut sums = vec![[0.0, 0.0]; k];
        let mut counts = vec![0usize; k];
        for (i, &p) in points.iter().enumerate() {
            let c = assignment[i];
            sums[c][0] += p[0];
            sums[c][1] += p[1];
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
            }
        }
    }
    Ok(KMeans { centroids, assignment, wcss_history })
}

/// Clusters the test retailers by location into `k` groups of exactly
/// `group_size` members. Returns dataset retailer indices per group.
pub fn build_instances(dataset: &DemandDataset, k: usize, group_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let pool = &dataset.test;
    if k * group_size > pool.len() || k == 0 || group_size == 0 {
        return Err(Error::InvalidInput(format!(
            "{k} groups of {group_size} need more than the {} test retailers",
            pool.len()
        )));
    }
    let points: Vec<[f64; 2]> = pool.iter().map(|&i| dataset.coords[i]).collect();
    let groups = balanced_groups(&points, k, group_size, seed)?;
    Ok(groups.into_iter().map(|g| g.into_iter().map(|p| pool[p]).collect()).collect())
}

/// k-means followed by greedy rebalancing to exact group sizes; points left
/// over when `k * group_size < points.len()` are dropped. Indices refer to
/// `points`.
pub fn balanced_groups(points: &[[f64; 2]], k: usize, group_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut rng = rng_from_seed(seed);
    let km = kmeans(points, k, 100, &mut rng)?;
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in km.assignment.iter().enumerate() {
        groups[c].push(i);
    }
    let centroid = |g: &[usize]| -> [f64; 2] {
        let n = g.len().max(1) as f64;
        [g.iter().map(|&i| points[i][0]).sum::<f64>() / n, g.iter().map(|&i| points[i][1]).sum::<f64>() / n]
    };
    let mut centroids: Vec<[f64; 2]> = (0..k).map(|c| if groups[c].is_empty() { km.centroids[c] } else { centroid(&groups[c]) }).collect();
    loop {
        let Some(over) = (0..k).find(|&c| groups[c].len() > group_size) else { break };
        let (pos, &member) = groups[over]
            .iter()
            .enumerate()
            .max_by(|a, b| sq_dist(points[*a.1], centroids[over]).total_cmp(&sq_dist(points[*b.1], centroids[over])).then(b.0.cmp(&a.0)))
            .expect("oversized group is nonempty");
        groups[over].remove(pos);
        let target = (0..k)
            .filter(|&c| groups[c].len() < group_size)
            .min_by(|&a, &b| sq_dist(points[member], centroids[a]).total_cmp(&sq_dist(points[member], centroids[b])));
        if let Some(t) = target {
            groups[t].push(member);
            centroids[t] = centroid(&groups[t]);
        }
        centroids[over] = centroid(&groups[over]);
    }
    if groups.iter().any(|g| g.len() != group_size) {
        return Err(Error::InvalidInput("rebalancing could not reach exact group sizes".into()));
    }
    for g in groups.iter_mut() {
        g.sort_unstable();
    }
    Ok(groups)
}

/// Instance parameters not determined by the data.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceDefaults {
    pub n_vehicles: usize,
    pub holding_cost: f64,
    pub backorder_cost: f64,
    pub transport_scale: f64,
    pub history_len: usize,
    pub lookahead: usize,
    pub eval_horizon: usize,
}

impl Default for InstanceDefaults {
    fn default() -> Self {
        InstanceDefaults {
            n_vehicles: 2,
            holding_cost: 0.3,
            backorder_cost: 3.0,
            transport_scale: 0.05,
            history_len: 14,
            lookahead: 5,
            eval_horizon: 30,
        }
    }
}

/// Instance for one retailer group; the warehouse sits at the group's
/// centroid, `Q = ceil(1.5 N mu / V)`, `I^max = ceil(3 mu)` and inventories
/// start half full, where `mu` is the training mean demand.
pub fn make_instance(dataset: &DemandDataset, group: &[usize], d: &InstanceDefaults, seed: u64) -> Result<Instance> {
    let mu = dataset.train_mean();
    let n = group.len();
    let mut coords = Vec::with_capacity(n + 1);
    let pts: Vec<[f64; 2]> = group.iter().map(|&i| dataset.coords[i]).collect();
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n.max(1) as f64;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n.max(1) as f64;
    coords.push([cx, cy]);
    coords.extend(pts);
    let vehicle_capacity = (1.5 * n as f64 * mu / d.n_vehicles as f64).ceil().max(1.0);
    let inv_capacity = (3.0 * mu).ceil().max(1.0);
    let inst = Instance {
        n_retailers: n,
        coords,
        n_vehicles: d.n_vehicles,
        vehicle_capacity,
        inv_capacity,
        holding_cost: d.holding_cost,
        backorder_cost: d.backorder_cost,
        transport_scale: d.transport_scale,
        history_len: d.history_len,
        lookahead: d.lookahead,
        eval_horizon: d.eval_horizon,
        rng_seed: seed,
        initial_inventory: Some(vec![inv_capacity / 2.0; n]),
        retailer_ids: Some(group.to_vec()),
    };
    inst.validate()?;
    Ok(inst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calendar_starts_on_a_wednesday() {
        let c = Calendar::leap_year(368);
        assert_eq!((c.day_of_year[0], c.day_of_week[0]), (1, 3));
        assert_eq!((c.day_of_year[365], c.day_of_week[365]), (366, 4));
        assert_eq!(c.day_of_year[366], 1);
        assert_eq!(c.day_of_week[4], 7);
    }

    #[test]
    fn trend_cycle_vanishes_at_full_periods() {
        assert!(cycle(366, 7, CycleForm::Printed).abs() < 1e-12);
        assert!(cycle(366, 7, CycleForm::Conventional).abs() < 1e-12);
        let cal = Calendar { day_of_year: vec![366], day_of_week: vec![7] };
        let s = trend_series(TrendParams { phi: 1.0, v0: 6.0 }, &cal, CycleForm::Printed);
        assert!((s[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn trend_growth() {
        let cal = Calendar { day_of_year: vec![366; 11], day_of_week: vec![7; 11] };
        let s = trend_series(TrendParams { phi: 1.01, v0: 5.0 }, &cal, CycleForm::Printed);
        assert!((s[10] - 5.0 * 1.01f64.powi(10)).abs() < 1e-9);
        assert!((s[10] - 5.523).abs() < 1e-3);
    }

    #[test]
    fn generators_are_deterministic_and_nonnegative() {
        for p in [Pattern::Trend, Pattern::Random, Pattern::Both] {
            let a = gen_series(p, 366, 42, CycleForm::Printed);
            assert_eq!(a, gen_series(p, 366, 42, CycleForm::Printed));
            assert_ne!(a, gen_series(p, 366, 43, CycleForm::Printed));
            assert!(a.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn degenerate_random_is_constant() {
        let mut rng = rng_from_seed(1);
        assert_eq!(random_series(RandomParams { mu: 10.0, var: 0.0 }, 5, &mut rng), vec![10.0; 5]);
    }

    #[test]
    fn random_sample_mean() {
        // Monte Carlo oracle: standard error 2/sqrt(1e5) ~ 0.006.
        let mut rng = rng_from_seed(7);
        let s = random_series(RandomParams { mu: 10.0, var: 4.0 }, 100_000, &mut rng);
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        assert!((mean - 10.0).abs() < 0.05);
    }

    #[test]
    fn both_with_zero_trend_is_random() {
        let cal = Calendar::leap_year(10);
        let trend = vec![0.0; 10];
        let mut rng = rng_from_seed(3);
        let random = random_series(RandomParams { mu: 10.0, var: 3.0 }, 10, &mut rng);
        let sum: Vec<f64> = trend.iter().zip(&random).map(|(a, b): (&f64, &f64)| (a + b).max(0.0)).collect();
        assert_eq!(sum, random);
        assert_eq!(cal.len(), 10);
    }

    #[test]
    fn split_is_seventy_thirty() {
        let mut rng = rng_from_seed(0);
        let (tr, te) = split_indices(600, &mut rng);
        assert_eq!((tr.len(), te.len()), (420, 180));
        assert!(tr.iter().all(|i| !te.contains(i)));
    }

    #[test]
    fn square_corners_group_adjacent() {
        let pts = [[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
        let groups = balanced_groups(&pts, 2, 2, 5).unwrap();
        // Oracle: the best 2-partition into pairs by within-pair distance.
        let cost = |g: &[usize]| sq_dist(pts[g[0]], pts[g[1]]);
        let best = [[[0, 1], [2, 3]], [[0, 2], [1, 3]], [[0, 3], [1, 2]]]
            .iter()
            .map(|p| cost(&p[0]) + cost(&p[1]))
            .fold(f64::INFINITY, f64::min);
        assert_eq!(cost(&groups[0]) + cost(&groups[1]), best);
    }

    #[test]
    fn single_cluster_takes_everything() {
        let pts: Vec<[f64; 2]> = (0..7).map(|i| [i as f64, (i * i) as f64]).collect();
        let g = balanced_groups(&pts, 1, 7, 1).unwrap();
        assert_eq!(g, vec![(0..7).collect::<Vec<_>>()]);
    }

    #[test]
    fn instances_have_exact_sizes_and_are_deterministic() {
        let ds = DemandDataset::generate(Pattern::Random, 100, 30, 9, CycleForm::Printed, CoordsBox::default()).unwrap();
        let a = build_instances(&ds, 3, 9, 4).unwrap();
        assert_eq!(a, build_instances(&ds, 3, 9, 4).unwrap());
        assert!(a.iter().all(|g| g.len() == 9));
        let mut all: Vec<usize> = a.concat();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 27);
        assert!(all.iter().all(|i| ds.test.contains(i)));
        assert!(build_instances(&ds, 4, 9, 4).is_err());
    }

    #[test]
    fn default_instance_parameters() {
        let ds = DemandDataset::generate(Pattern::Random, 20, 30, 1, CycleForm::Printed, CoordsBox::default()).unwrap();
        let mu = ds.train_mean();
        let inst = make_instance(&ds, &ds.test[..4], &InstanceDefaults::default(), 0).unwrap();
        assert_eq!(inst.vehicle_capacity, (1.5 * 4.0 * mu / 2.0).ceil());
        assert_eq!(inst.inv_capacity, (3.0 * mu).ceil());
        assert_eq!(inst.initial_inventories(), vec![inst.inv_capacity / 2.0; 4]);
    }

    #[test]
    fn dataset_json_round_trip() {
        let ds = DemandDataset::generate(Pattern::Both, 5, 20, 2, CycleForm::Conventional, CoordsBox::default()).unwrap();
        let text = ds.to_json().unwrap();
        assert!(text.contains("\"format\":\"scpo-dataset-v1\""));
        assert_eq!(DemandDataset::from_json(&text).unwrap(), ds);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn kmeans_wcss_non_increasing(seed in 0u64..10_000, n in 3usize..60, k in 1usize..4) {
                let mut rng = rng_from_seed(seed);
                let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)]).collect();
                let km = kmeans(&pts, k.min(n), 100, &mut rng).unwrap();
                for w in km.wcss_history.windows(2) {
                    prop_assert!(w[1] <= w[0] + 1e-9);
                }
            }

            #[test]
            fn series_nonnegative(seed in 0u64..10_000, p in 0usize..3) {
                let pattern = [Pattern::Trend, Pattern::Random, Pattern::Both][p];
                prop_assert!(gen_series(pattern, 50, seed, CycleForm::Printed).iter().all(|&v| v >= 0.0));
            }
        }
    }
}
