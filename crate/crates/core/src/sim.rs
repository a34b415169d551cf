//! Rolling-horizon evaluation of replenishment policies on true demand, and
//! the experiment report built from it.
//!
//! At every epoch a policy turns the observed history into a scenario set,
//! the lookahead problem is solved, the period-0 plan is executed against the
//! realised demand and the system moves on.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Calendar, DemandDataset, Pattern};
use crate::error::{Error, Result};
use crate::forecast::{
    forecast_mse, mle_fit, mle_scenarios, residual_scenarios, sample_scenarios, LstmModel, MqrnnModel, ResidualFit,
    ScenarioSet,
};
use crate::model::{transition, validate_plan, CostBreakdown, Instance, Plan, State};
use crate::rng_from_seed;
use crate::sirp::{extract_decision, matheuristic_solve, pha_solve, IrpProblem, MatheuristicConfig, PhaParams, SolveOptions};

pub const REPORT_FORMAT: &str = "scpo-report-v1";

/// Scenario count of the ScPO policies.
pub const DEFAULT_SCPO_SCENARIOS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    Mqrnn,
    Lstm,
    Mle,
}

impl FromStr for Predictor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mqrnn" => Ok(Predictor::Mqrnn),
            "lstm" => Ok(Predictor::Lstm),
            "mle" => Ok(Predictor::Mle),
            _ => Err(Error::InvalidInput(format!("unknown predictor '{s}' (expected mqrnn, lstm or mle)"))),
        }
    }
}

impl fmt::Display for Predictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Predictor::Mqrnn => "MQRNN",
            Predictor::Lstm => "LSTM",
            Predictor::Mle => "MLE",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "predictor")]
pub enum PolicyKind {
    /// Perfect information: the true future is the only scenario.
    Pi,
    /// Expected value: the mean of the last `L` demands, held constant.
    Ev,
    /// Empirical: one resampled history period per future period.
    Emp,
    /// Predict-then-optimise on a single point scenario.
    Pto(Predictor),
    ScpoSs(Predictor),
    ScpoTs(Predictor),
}

impl PolicyKind {
    pub fn predictor(&self) -> Option<Predictor> {
        match *self {
            PolicyKind::Pto(p) | PolicyKind::ScpoSs(p) | PolicyKind::ScpoTs(p) => Some(p),
            _ => None,
        }
    }

    pub fn is_scpo(&self) -> bool {
        matches!(self, PolicyKind::ScpoSs(_) | PolicyKind::ScpoTs(_))
    }

    /// Short column label, e.g. `ScPO-SS-MQRNN`.
    pub fn label(&self) -> String {
        match self {
            PolicyKind::Pi => "PI".into(),
            PolicyKind::Ev => "EV".into(),
            PolicyKind::Emp => "EMP".into(),
            PolicyKind::Pto(p) => format!("PtO-{p}"),
            PolicyKind::ScpoSs(p) => format!("ScPO-SS-{p}"),
            PolicyKind::ScpoTs(p) => format!("ScPO-TS-{p}"),
        }
    }
}

impl FromStr for PolicyKind {
    type Err = Error;
    /// Parses `pi`, `ev`, `emp`, `pto:<p>`, `scpo-ss:<p>` and `scpo-ts:<p>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (head, pred) = match s.split_once(':') {
            Some((h, p)) => (h, Some(p.parse::<Predictor>()?)),
            None => (s.as_str(), None),
        };
        let kind = match (head, pred) {
            ("pi", None) => PolicyKind::Pi,
            ("ev", None) => PolicyKind::Ev,
            ("emp", None) => PolicyKind::Emp,
            ("pto", Some(p)) => PolicyKind::Pto(p),
            ("scpo-ss", Some(p)) => PolicyKind::ScpoSs(p),
            ("scpo-ts", Some(p)) => PolicyKind::ScpoTs(p),
            _ => return Err(Error::InvalidInput(format!("unknown policy '{s}'"))),
        };
        Ok(kind)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub kind: PolicyKind,
    /// Scenarios per epoch; always 1 outside the ScPO policies.
    pub n_scenarios: usize,
    pub matheuristic: MatheuristicConfig,
    pub pha: PhaParams,
}

impl Policy {
    pub fn new(kind: PolicyKind) -> Self {
        let n_scenarios = if kind.is_scpo() { DEFAULT_SCPO_SCENARIOS } else { 1 };
        Policy { kind, n_scenarios, matheuristic: MatheuristicConfig::default(), pha: PhaParams::default() }
    }

    pub fn with_scenarios(mut self, n: usize) -> Self {
        if self.kind.is_scpo() {
            self.n_scenarios = n.max(1);
        }
        self
    }

    pub fn label(&self) -> String {
        self.kind.label()
    }
}

/// Trained forecasters available to the predictor-based policies.
#[derive(Clone, Debug, Default)]
pub struct Forecasters {
    pub mqrnn: Option<MqrnnModel>,
    pub lstm: Option<LstmModel>,
}

impl Forecasters {
    /// Fails if `policy` needs a model that is absent or built for another
    /// lookahead or history length.
    pub fn check(&self, policy: &PolicyKind, inst: &Instance) -> Result<()> {
        match policy.predictor() {
            Some(Predictor::Mqrnn) => {
                let m = self.mqrnn.as_ref().ok_or_else(|| Error::InvalidInput(format!("{policy} needs an MQRNN model")))?;
                if m.config.lookahead != inst.lookahead || m.config.history_len != inst.history_len {
                    return Err(Error::Shape(format!(
                        "MQRNN built for L = {}, lookahead = {}; instance has L = {}, lookahead = {}",
                        m.config.history_len, m.config.lookahead, inst.history_len, inst.lookahead
                    )));
                }
            }
            Some(Predictor::Lstm) => {
                let m = self.lstm.as_ref().ok_or_else(|| Error::InvalidInput(format!("{policy} needs an LSTM model")))?;
                if m.config.history_len != inst.history_len {
                    return Err(Error::Shape(format!(
                        "LSTM built for L = {}; instance has L = {}",
                        m.config.history_len, inst.history_len
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// True demand of one instance: `truth[i][k]` on the calendar of the series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeData {
    pub truth: Vec<Vec<f64>>,
    pub calendar: Calendar,
    /// Series index of the first decision epoch.
    pub start: usize,
}

impl EpisodeData {
    /// Series of the instance's retailers; the episode opens at the first
    /// epoch with a full `L`-period history.
    pub fn from_dataset(ds: &DemandDataset, inst: &Instance) -> Result<Self> {
        let ids = inst
            .retailer_ids
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("instance has no retailer_ids to look up demand".into()))?;
        let truth: Vec<Vec<f64>> = ids
            .iter()
            .map(|&r| {
                ds.sequences
                    .get(r)
                    .cloned()
                    .ok_or_else(|| Error::InvalidInput(format!("retailer id {r} not in dataset")))
            })
            .collect::<Result<_>>()?;
        let t = ds.horizon();
        let need = inst.history_len + inst.eval_horizon + inst.lookahead;
        if t < need {
            return Err(Error::InvalidInput(format!("series of length {t} shorter than L + horizon + lookahead = {need}")));
        }
        let data = EpisodeData { truth, calendar: ds.calendar.clone(), start: inst.history_len };
        data.validate(inst)?;
        Ok(data)
    }

    pub fn validate(&self, inst: &Instance) -> Result<()> {
        if self.truth.len() != inst.n_retailers {
            return Err(Error::Shape(format!("{} truth series for {} retailers", self.truth.len(), inst.n_retailers)));
        }
        let need = self.start + inst.eval_horizon + inst.lookahead;
        if self.start < inst.history_len {
            return Err(Error::InvalidInput(format!("episode start {} precedes a full history", self.start)));
        }
        if self.truth.iter().any(|s| s.len() < need) || self.calendar.len() < need {
            return Err(Error::InvalidInput(format!("truth and calendar must cover {need} periods")));
        }
        if self.truth.iter().flatten().any(|&d| d < 0.0 || !d.is_finite()) {
            return Err(Error::InvalidInput("truth must be finite and nonnegative".into()));
        }
        Ok(())
    }

    fn window(&self, from: usize, to: usize) -> Vec<Vec<f64>> {
        self.truth.iter().map(|s| s[from..to].to_vec()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub inventories_before: Vec<f64>,
    pub plan: Plan,
    pub demand: Vec<f64>,
    pub cost: CostBreakdown,
    /// Demand met from stock on hand after delivery.
    pub satisfied: f64,
    pub demand_total: f64,
    /// MSE of the scenario mean against the true lookahead demand.
    pub mse: f64,
    /// The no-op plan replaced an infeasible solver output.
    pub fallback: bool,
    #[serde(skip)]
    pub solve_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub policy: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub cost: CostBreakdown,
    pub service: f64,
    pub mse: f64,
    pub fallbacks: usize,
    /// Mean solve time per epoch in seconds.
    #[serde(skip)]
    pub mean_time: f64,
}

/// Mixes an episode seed and an epoch into an independent stream seed.
pub fn epoch_seed(seed: u64, k: usize) -> u64 {
    let mut z = seed ^ (k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-retailer forecaster state fixed for a whole episode.
enum Source<'a> {
    Plain,
    Mqrnn(&'a MqrnnModel),
    Lstm(&'a LstmModel, Vec<ResidualFit>),
}

fn scenarios_at(
    kind: &PolicyKind,
    n_scen: usize,
    source: &Source<'_>,
    data: &EpisodeData,
    state: &State,
    tau: usize,
    l: usize,
    seed: u64,
) -> Result<ScenarioSet> {
    let hist = &state.history;
    let n = hist.len();
    match kind {
        PolicyKind::Pi => ScenarioSet::single(data.window(tau, tau + l)),
        PolicyKind::Ev => {
            let m: Vec<Vec<f64>> =
                hist.iter().map(|h| vec![h.iter().sum::<f64>() / h.len().max(1) as f64; l]).collect();
            ScenarioSet::single(m)
        }
        PolicyKind::Emp => {
            let mut rng = rng_from_seed(seed);
            let len = hist[0].len();
            let picks: Vec<usize> = (0..l).map(|_| rng.random_range(0..len)).collect();
            ScenarioSet::single((0..n).map(|i| picks.iter().map(|&j| hist[i][j]).collect()).collect())
        }
        PolicyKind::Pto(p) | PolicyKind::ScpoSs(p) | PolicyKind::ScpoTs(p) => {
            let single = matches!(kind, PolicyKind::Pto(_));
            match (p, source) {
                (Predictor::Mqrnn, Source::Mqrnn(m)) => {
                    let f = m.predict(hist, &data.calendar, tau)?;
                    if single {
                        ScenarioSet::single(f.median())
                    } else {
                        let extra = n_scen.saturating_sub(f.levels.len());
                        sample_scenarios(&f, extra, seed)
                    }
                }
                (Predictor::Lstm, Source::Lstm(m, fits)) => {
                    let point = m.predict(hist, &data.calendar, tau, l)?;
                    if single {
                        ScenarioSet::single(point)
                    } else {
                        residual_scenarios(&point, fits, n_scen, seed)
                    }
                }
                (Predictor::Mle, _) => {
                    let fits = hist.iter().map(|h| mle_fit(h)).collect::<Result<Vec<_>>>()?;
                    mle_scenarios(&fits, l, if single { 1 } else { n_scen }, seed)
                }
                _ => Err(Error::InvalidInput(format!("no model loaded for {kind}"))),
            }
        }
    }
}

/// Demand met from stock after delivery: `min(d, max(0, I + u))`.
pub fn directly_satisfied(inventory: f64, delivery: f64, demand: f64) -> f64 {
    demand.min((inventory + delivery).max(0.0))
}

/// Fraction of demand met directly; 1 when there was no demand.
pub fn service_level(satisfied: f64, demand: f64) -> f64 {
    if demand > 0.0 {
        satisfied / demand
    } else {
        1.0
    }
}

/// Share of the EV-to-PI cost gap closed by a method; `None` when the gap is
/// zero.
pub fn saving(cost_m: f64, cost_ev: f64, cost_pi: f64) -> Option<f64> {
    let gap = cost_ev - cost_pi;
    if gap.abs() <= 1e-12 * cost_ev.abs().max(1.0) {
        None
    } else {
        Some(1.0 - (cost_m - cost_pi) / gap)
    }
}

/// Saving as a whole percentage, halves rounded away from zero.
pub fn saving_percent(s: f64) -> i64 {
    (100.0 * s).round() as i64
}

/// Runs one policy over `inst.eval_horizon` epochs of `data`.
/// Moments of the equal-weight mixture of the training-series residual fits;
/// used when a retailer has too little pre-episode history to fit its own.
fn pooled_residuals(fits: &[(usize, ResidualFit)]) -> ResidualFit {
    if fits.is_empty() {
        return ResidualFit::from_samples(&[]);
    }
    let n = fits.len() as f64;
    let mean = fits.iter().map(|(_, f)| f.mean).sum::<f64>() / n;
    let second = fits.iter().map(|(_, f)| f.std * f.std + f.mean * f.mean).sum::<f64>() / n;
    ResidualFit { mean, std: (second - mean * mean).max(0.0).sqrt() }
}

pub fn run_episode(inst: &Instance, data: &EpisodeData, policy: &Policy, models: &Forecasters, seed: u64) -> Result<Episode> {
    inst.validate()?;
    data.validate(inst)?;
    models.check(&policy.kind, inst)?;
    let (ll, l) = (inst.history_len, inst.lookahead);
    let source = match policy.kind.predictor() {
        Some(Predictor::Mqrnn) => Source::Mqrnn(models.mqrnn.as_ref().expect("checked")),
        Some(Predictor::Lstm) => {
            let m = models.lstm.as_ref().expect("checked");
            let fits = data
                .truth
                .iter()
                .map(|s| {
                    if data.start < ll + 2 {
                        return Ok(pooled_residuals(&m.residuals));
                    }
                    m.fit_residuals(&s[..data.start], &data.calendar, 0)
                })
                .collect::<Result<Vec<_>>>()?;
            Source::Lstm(m, fits)
        }
        _ => Source::Plain,
    };

    let mut state = State::new(inst, inst.initial_inventories(), data.window(data.start - ll, data.start))?;
    let mut epochs = Vec::with_capacity(inst.eval_horizon);
    for k in 0..inst.eval_horizon {
        let tau = data.start + k;
        let eseed = epoch_seed(seed, k);
        let scen = scenarios_at(&policy.kind, policy.n_scenarios, &source, data, &state, tau, l, eseed)?;
        let future = data.window(tau, tau + l);
        let mse = forecast_mse(&scen.mean(), &future)?;
        let problem = IrpProblem::new(inst.clone(), state.inventories.clone(), scen)?;

        let clock = Instant::now();
        let sol = match policy.kind {
            PolicyKind::ScpoTs(_) => pha_solve(&problem, &PhaParams { matheuristic: policy.matheuristic.clone(), ..policy.pha.clone() }),
            _ => matheuristic_solve(&problem, &SolveOptions { config: policy.matheuristic.clone(), ..Default::default() }),
        };
        let solve_time = clock.elapsed().as_secs_f64();

        let mut plan = extract_decision(&sol, inst);
        let check = validate_plan(&state, &plan, inst);
        let fallback = !check.valid;
        if fallback {
            log::warn!(
                "{} epoch {k}: infeasible plan ({}); executing the no-op plan",
                policy.label(),
                check.violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
            );
            plan = Plan::empty(inst);
        }

        let demand: Vec<f64> = data.truth.iter().map(|s| s[tau]).collect();
        let satisfied = state
            .inventories
            .iter()
            .zip(&plan.deliveries)
            .zip(&demand)
            .map(|((&i, &u), &d)| directly_satisfied(i, u, d))
            .sum();
        let inventories_before = state.inventories.clone();
        let (next, cost) = transition(&state, &plan, &demand, inst)?;
        state = next;
        epochs.push(EpochRecord {
            epoch: k,
            inventories_before,
            plan,
            demand_total: demand.iter().sum(),
            demand,
            cost,
            satisfied,
            mse,
            fallback,
            solve_time,
        });
    }
    Ok(summarize(policy.label(), seed, epochs))
}

fn summarize(policy: String, seed: u64, epochs: Vec<EpochRecord>) -> Episode {
    let cost: CostBreakdown = epochs.iter().map(|e| e.cost).sum();
    let satisfied: f64 = epochs.iter().map(|e| e.satisfied).sum();
    let demand: f64 = epochs.iter().map(|e| e.demand_total).sum();
    let k = epochs.len().max(1) as f64;
    Episode {
        policy,
        seed,
        cost,
        service: service_level(satisfied, demand),
        mse: epochs.iter().map(|e| e.mse).sum::<f64>() / k,
        fallbacks: epochs.iter().filter(|e| e.fallback).count(),
        mean_time: epochs.iter().map(|e| e.solve_time).sum::<f64>() / k,
        epochs,
    }
}

/// One instance with its data and models, evaluated under one seed.
#[derive(Clone, Debug)]
pub struct Case {
    pub pattern: Pattern,
    pub instance: Instance,
    pub data: EpisodeData,
    pub seed: u64,
    pub models: Arc<Forecasters>,
}

/// Metrics of one policy on one pattern, averaged over its episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub pattern: Pattern,
    pub policy: String,
    pub episodes: usize,
    pub cost: f64,
    pub transport: f64,
    pub holding: f64,
    pub backorder: f64,
    /// Mean cost above PI; absent without a PI row.
    pub delta_cost: Option<f64>,
    /// Computed from the mean costs; absent without PI and EV rows or when
    /// they coincide.
    pub saving: Option<f64>,
    pub mse: f64,
    pub service: f64,
}

/// Mean solve time per epoch of one row. Kept out of the report so reports
/// stay reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub pattern: Pattern,
    pub policy: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub format: String,
    pub rows: Vec<ReportRow>,
    /// Per-episode traces, in case-major, policy-minor order.
    pub episodes: Vec<(Pattern, Episode)>,
    #[serde(skip)]
    pub times: Vec<TimingRow>,
}

impl SimReport {
    pub fn empty() -> Self {
        SimReport { format: REPORT_FORMAT.into(), rows: Vec::new(), episodes: Vec::new(), times: Vec::new() }
    }

    pub fn row(&self, pattern: Pattern, policy: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.pattern == pattern && r.policy == policy)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: SimReport = serde_json::from_str(text)?;
        if r.format != REPORT_FORMAT {
            return Err(Error::Format { expected: REPORT_FORMAT.into(), found: r.format });
        }
        Ok(r)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// One CSV line per pattern and policy.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        if self.rows.is_empty() {
            w.write_record(CSV_HEADER).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::InvalidInput(e.to_string()))
    }
}

const CSV_HEADER: [&str; 11] =
    ["pattern", "policy", "episodes", "cost", "transport", "holding", "backorder", "delta_cost", "saving", "mse", "service"];

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("csv: {e}"))
}

/// Runs every policy on every case, in parallel over (case, policy) pairs,
/// and aggregates per pattern and policy in input order.
pub fn run_experiment(cases: &[Case], policies: &[Policy]) -> Result<SimReport> {
    let jobs: Vec<(usize, usize)> = (0..cases.len()).flat_map(|c| (0..policies.len()).map(move |p| (c, p))).collect();
    let episodes: Vec<Episode> = jobs
        .par_iter()
        .map(|&(c, p)| {
            let case = &cases[c];
            run_episode(&case.instance, &case.data, &policies[p], &case.models, case.seed)
        })
        .collect::<Result<_>>()?;

    let mut patterns: Vec<Pattern> = Vec::new();
    for c in cases {
        if !patterns.contains(&c.pattern) {
            patterns.push(c.pattern);
        }
    }
    let mut rows = Vec::new();
    let mut times = Vec::new();
    for &pat in &patterns {
        let mut block = Vec::new();
        for (p, policy) in policies.iter().enumerate() {
            let eps: Vec<&Episode> = jobs
                .iter()
                .zip(&episodes)
                .filter(|((c, q), _)| *q == p && cases[*c].pattern == pat)
                .map(|(_, e)| e)
                .collect();
            let k = eps.len() as f64;
            let mean = |f: &dyn Fn(&Episode) -> f64| eps.iter().map(|e| f(e)).sum::<f64>() / k;
            block.push(ReportRow {
                pattern: pat,
                policy: policy.label(),
                episodes: eps.len(),
                cost: mean(&|e| e.cost.total),
                transport: mean(&|e| e.cost.transport),
                holding: mean(&|e| e.cost.holding),
                backorder: mean(&|e| e.cost.backorder),
                delta_cost: None,
                saving: None,
                mse: mean(&|e| e.mse),
                service: mean(&|e| e.service),
            });
            times.push(TimingRow { pattern: pat, policy: policy.label(), seconds: mean(&|e| e.mean_time) });
        }
        let find = |kind: PolicyKind| {
            policies.iter().position(|p| p.kind == kind).map(|i| block[i].cost)
        };
        let (pi, ev) = (find(PolicyKind::Pi), find(PolicyKind::Ev));
        for r in &mut block {
            r.delta_cost = pi.map(|c| r.cost - c);
            r.saving = match (pi, ev) {
                (Some(pi), Some(ev)) => saving(r.cost, ev, pi),
                _ => None,
            };
        }
        rows.extend(block);
    }
    let traces = jobs.iter().zip(episodes).map(|(&(c, _), e)| (cases[c].pattern, e)).collect();
    Ok(SimReport { format: REPORT_FORMAT.into(), rows, episodes: traces, times })
}

/// Text table with one block per pattern, one column per policy and rows
/// Cost, ΔCost, Saving, MSE, Service and (when timings are given) Time.
pub fn format_table(rows: &[ReportRow], times: &[TimingRow]) -> String {
    let mut out = String::new();
    let header = |policies: &[&str]| {
        let mut s = format!("{:<10}{:<9}", "Pattern", "Metric");
        for p in policies {
            s.push_str(&format!("{p:>16}"));
        }
        s.push('\n');
        s
    };
    if rows.is_empty() {
        out.push_str(&header(&[]));
        return out;
    }
    let mut patterns: Vec<Pattern> = Vec::new();
    for r in rows {
        if !patterns.contains(&r.pattern) {
            patterns.push(r.pattern);
        }
    }
    for pat in patterns {
        let block: Vec<&ReportRow> = rows.iter().filter(|r| r.pattern == pat).collect();
        let labels: Vec<&str> = block.iter().map(|r| r.policy.as_str()).collect();
        out.push_str(&header(&labels));
        let opt = |v: Option<f64>, f: &dyn Fn(f64) -> String| v.map_or("N/A".to_string(), f);
        let mut lines: Vec<(&str, Vec<String>)> = vec![
            ("Cost", block.iter().map(|r| format!("{:.1}", r.cost)).collect()),
            ("ΔCost", block.iter().map(|r| opt(r.delta_cost, &|d| format!("{d:.1}"))).collect()),
            ("Saving", block.iter().map(|r| opt(r.saving, &|s| format!("{}%", saving_percent(s)))).collect()),
            ("MSE", block.iter().map(|r| format!("{:.2}", r.mse)).collect()),
            ("Service", block.iter().map(|r| format!("{:.1}%", 100.0 * r.service)).collect()),
        ];
        if !times.is_empty() {
            lines.push((
                "Time",
                block
                    .iter()
                    .map(|r| {
                        times
                            .iter()
                            .find(|t| t.pattern == pat && t.policy == r.policy)
                            .map_or("N/A".into(), |t| format!("{:.2}s", t.seconds))
                    })
                    .collect(),
            ));
        }
        for (name, cells) in lines {
            out.push_str(&format!("{:<10}{:<9}", pat.to_string(), name));
            for c in cells {
                out.push_str(&format!("{c:>16}"));
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests;
