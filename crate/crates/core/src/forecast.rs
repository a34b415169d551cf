//! Demand predictors and scenario generation.
//!
//! Three predictors feed the optimiser:
//!
//! - [`MqrnnModel`]: a shared sequence-to-sequence quantile forecaster with
//!   an LSTM encoder, a global MLP producing horizon contexts and a local MLP
//!   producing one quantile vector per horizon.
//! - [`LstmModel`]: a one-step point forecaster applied recursively, with a
//!   Normal residual model per retailer.
//! - [`mle_fit`]: a per-retailer marginal distribution picked among five
//!   families by a chi-square statistic.
//!
//! All network inputs are divided by a per-window scale `max(mean history, 1)`
//! and outputs multiplied back, so a single model serves retailers of
//! different volumes.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Exp, Gamma, LogNormal, Normal, Weibull};

use crate::datagen::{Calendar, DemandDataset};
use crate::error::{Error, Result};
use crate::nn::{lstm_cell, quantile_loss_node, Adam, Graph, LstmParams, NodeId, ParamId, ParamStore, Tensor};
use crate::{rng_from_seed, Rng};

pub const DEFAULT_QUANTILES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Quantile grid `values[i][t][b]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileForecast {
    pub levels: Vec<f64>,
    pub values: Vec<Vec<Vec<f64>>>,
}

impl QuantileForecast {
    /// Clamps at zero and sorts each `(i, t)` row ascending.
    pub fn repair(&mut self) {
        for row in self.values.iter_mut().flatten() {
            for v in row.iter_mut() {
                *v = v.max(0.0);
            }
            row.sort_by(f64::total_cmp);
        }
    }

    pub fn is_monotone(&self) -> bool {
        self.values.iter().flatten().all(|row| row.windows(2).all(|w| w[0] <= w[1]))
    }

    pub fn n_retailers(&self) -> usize {
        self.values.len()
    }

    pub fn lookahead(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// `N x l` matrix of the `b`-th quantile.
    pub fn grid(&self, b: usize) -> Vec<Vec<f64>> {
        self.values.iter().map(|ts| ts.iter().map(|row| row[b]).collect()).collect()
    }

    /// Grid of the level closest to 0.5.
    pub fn median(&self) -> Vec<Vec<f64>> {
        let b = (0..self.levels.len())
            .min_by(|&a, &b| (self.levels[a] - 0.5).abs().total_cmp(&(self.levels[b] - 0.5).abs()))
            .unwrap_or(0);
        self.grid(b)
    }
}

/// Weighted demand scenarios `scenarios[w][i][t]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub scenarios: Vec<Vec<Vec<f64>>>,
    pub probabilities: Vec<f64>,
}

/// `n` probabilities of `1/n` whose sequential sum is exactly one.
pub fn uniform_probabilities(n: usize) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    let mut p = vec![1.0 / n as f64; n];
    let head: f64 = p[..n - 1].iter().sum();
    p[n - 1] = 1.0 - head;
    p
}

impl ScenarioSet {
    pub fn new(scenarios: Vec<Vec<Vec<f64>>>, probabilities: Vec<f64>) -> Result<Self> {
        let s = ScenarioSet { scenarios, probabilities };
        s.validate()?;
        Ok(s)
    }

    pub fn uniform(scenarios: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let p = uniform_probabilities(scenarios.len());
        Self::new(scenarios, p)
    }

    pub fn single(matrix: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(vec![matrix], vec![1.0])
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenarios.is_empty() || self.scenarios.len() != self.probabilities.len() {
            return Err(Error::InvalidInput("scenario set needs one probability per scenario".into()));
        }
        let n = self.scenarios[0].len();
        let l = self.scenarios[0].first().map_or(0, Vec::len);
        for s in &self.scenarios {
            if s.len() != n || s.iter().any(|r| r.len() != l) {
                return Err(Error::Shape("scenarios differ in shape".into()));
            }
            if s.iter().flatten().any(|&d| !(d >= 0.0 && d.is_finite())) {
                return Err(Error::InvalidInput("scenario demands must be finite and nonnegative".into()));
            }
        }
        if self.probabilities.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::InvalidInput("negative scenario probability".into()));
        }
        let total: f64 = self.probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("scenario probabilities sum to {total}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn n_retailers(&self) -> usize {
        self.scenarios[0].len()
    }

    pub fn lookahead(&self) -> usize {
        self.scenarios[0].first().map_or(0, Vec::len)
    }

    /// Probability-weighted mean scenario.
    pub fn mean(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.lookahead()]; self.n_retailers()];
        for (s, &p) in self.scenarios.iter().zip(&self.probabilities) {
            for (mi, si) in m.iter_mut().zip(s) {
                for (a, &b) in mi.iter_mut().zip(si) {
                    *a += p * b;
                }
            }
        }
        m
    }

    /// Keeps the first `l` periods of every scenario.
    pub fn truncated(&self, l: usize) -> ScenarioSet {
        ScenarioSet {
            scenarios: self
                .scenarios
                .iter()
                .map(|s| s.iter().map(|r| r[..l.min(r.len())].to_vec()).collect())
                .collect(),
            probabilities: self.probabilities.clone(),
        }
    }
}

/// The quantile grids themselves, then `n_extra` scenarios each drawing one
/// bin `[q_b, q_{b+1}]` and a uniform value inside it per `(i, t)`.
pub fn sample_scenarios(forecast: &QuantileForecast, n_extra: usize, seed: u64) -> Result<ScenarioSet> {
    if !forecast.is_monotone() {
        return Err(Error::InvalidInput("quantile forecast is not monotone".into()));
    }
    let nb = forecast.levels.len();
    if nb == 0 {
        return Err(Error::InvalidInput("forecast has no quantile levels".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut scenarios: Vec<Vec<Vec<f64>>> = (0..nb).map(|b| forecast.grid(b)).collect();
    if nb >= 2 {
        for _ in 0..n_extra {
            let beta = rng.random_range(0..nb - 1);
            let s = forecast
                .values
                .iter()
                .map(|ts| {
                    ts.iter()
                        .map(|row| {
                            let (lo, hi) = (row[beta], row[beta + 1]);
                            if hi > lo {
                                rng.random_range(lo..=hi)
                            } else {
                                lo
                            }
                        })
                        .collect()
                })
                .collect();
            scenarios.push(s);
        }
    } else {
        scenarios.extend(std::iter::repeat(forecast.grid(0)).take(n_extra));
    }
    ScenarioSet::uniform(scenarios)
}

/// Mean squared error over all `N x l` entries.
pub fn forecast_mse(point: &[Vec<f64>], realized: &[Vec<f64>]) -> Result<f64> {
    if point.len() != realized.len() || point.iter().zip(realized).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Shape("forecast and realization differ in shape".into()));
    }
    let n: usize = point.iter().map(Vec::len).sum();
    if n == 0 {
        return Ok(0.0);
    }
    let sse: f64 = point.iter().flatten().zip(realized.iter().flatten()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(sse / n as f64)
}

fn window_scale(history: &[f64]) -> f64 {
    let mean = history.iter().sum::<f64>() / history.len().max(1) as f64;
    mean.max(1.0)
}

/// Fills `(demand / scale, day-of-year / 366, day-of-week / 7)` per step.
fn encoder_inputs(history: &[f64], calendar: &Calendar, start: usize, scale: f64, out: &mut [Vec<f64>]) {
    for (k, (v, o)) in history.iter().zip(out.iter_mut()).enumerate() {
        let (y, w) = calendar.features_at(start + k);
        o.clear();
        o.extend_from_slice(&[v / scale, y, w]);
    }
}

// ---------------------------------------------------------------- MQRNN

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MqrnnConfig {
    pub history_len: usize,
    pub lookahead: usize,
    pub quantiles: Vec<f64>,
    pub encoder_hidden: usize,
    pub global_hidden: usize,
    pub context: usize,
    pub local_hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Spacing between training window starts.
    pub stride: usize,
    pub seed: u64,
}

impl Default for MqrnnConfig {
    fn default() -> Self {
        MqrnnConfig {
            history_len: 14,
            lookahead: 5,
            quantiles: DEFAULT_QUANTILES.to_vec(),
            encoder_hidden: 32,
            global_hidden: 64,
            context: 16,
            local_hidden: 32,
            lr: 1e-3,
            epochs: 30,
            batch: 64,
            stride: 1,
            seed: 0,
        }
    }
}

impl MqrnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history_len == 0 || self.lookahead == 0 {
            return Err(Error::InvalidInput("history and lookahead must be positive".into()));
        }
        if self.quantiles.is_empty() || self.quantiles.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidInput("quantile levels must lie in (0, 1)".into()));
        }
        if [self.encoder_hidden, self.global_hidden, self.context, self.local_hidden, self.batch, self.stride]
            .contains(&0)
        {
            return Err(Error::InvalidInput("layer sizes, batch and stride must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct MqrnnIds {
    enc: LstmParams,
    g1: (ParamId, ParamId),
    g2: (ParamId, ParamId),
    l1: (ParamId, ParamId),
    l2: (ParamId, ParamId),
}

/// Trained (or freshly initialised) MQRNN.
#[derive(Clone, Debug)]
pub struct MqrnnModel {
    pub config: MqrnnConfig,
    pub params: ParamStore,
    ids: MqrnnIds,
    /// Mean per-window pinball loss per epoch, in scaled units.
    pub loss_history: Vec<f64>,
}

/// Graph with inputs `x_0..x_{L-1}` (3 x 1), future calendar features
/// (2l x 1) and targets (l|B| x 1, horizon-major).
pub struct MqrnnGraph {
    pub graph: Graph,
    pub pred: NodeId,
}

impl MqrnnModel {
    pub fn new(config: MqrnnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(config.seed);
        let mut params = ParamStore::new();
        let (h, c, l, nb) = (config.encoder_hidden, config.context, config.lookahead, config.quantiles.len());
        let enc = LstmParams::new(&mut params, "enc", 3, h, &mut rng);
        let gin = h + 2 * l;
        let g1 = (
            params.add_uniform("global.w1", config.global_hidden, gin, gin, &mut rng),
            params.add_uniform("global.b1", config.global_hidden, 1, gin, &mut rng),
        );
        let g2 = (
            params.add_uniform("global.w2", (l + 1) * c, config.global_hidden, config.global_hidden, &mut rng),
            params.add_uniform("global.b2", (l + 1) * c, 1, config.global_hidden, &mut rng),
        );
        let lin = 2 * c + 2;
        let l1 = (
            params.add_uniform("local.w1", config.local_hidden, lin, lin, &mut rng),
            params.add_uniform("local.b1", config.local_hidden, 1, lin, &mut rng),
        );
        let l2 = (
            params.add_uniform("local.w2", nb, config.local_hidden, config.local_hidden, &mut rng),
            params.add_uniform("local.b2", nb, 1, config.local_hidden, &mut rng),
        );
        Ok(MqrnnModel { config, params, ids: MqrnnIds { enc, g1, g2, l1, l2 }, loss_history: Vec::new() })
    }

    /// Builds the unrolled network; the last node is the pinball loss.
    pub fn build_graph(&self) -> Result<MqrnnGraph> {
        let cfg = &self.config;
        let (hs, c, l, nb) = (cfg.encoder_hidden, cfg.context, cfg.lookahead, cfg.quantiles.len());
        let ps = &self.params;
        let mut g = Graph::new();
        let xs: Vec<NodeId> = (0..cfg.history_len).map(|_| g.input(3, 1)).collect();
        let af = g.input(2 * l, 1);
        let target = g.input(l * nb, 1);
        let mut h = g.constant(&Tensor::zeros(vec![hs, 1]));
        let mut cell = g.constant(&Tensor::zeros(vec![hs, 1]));
        for &x in &xs {
            (h, cell) = lstm_cell(&mut g, ps, &self.ids.enc, x, h, cell)?;
        }
        let gin = g.concat(&[h, af])?;
        let z1 = g.affine(ps, self.ids.g1.0, self.ids.g1.1, gin)?;
        let a1 = g.tanh(z1);
        let ctx = g.affine(ps, self.ids.g2.0, self.ids.g2.1, a1)?;
        let ca = g.slice(ctx, l * c, c)?;
        let mut outs = Vec::with_capacity(l);
        for t in 0..l {
            let ct = g.slice(ctx, t * c, c)?;
            let aft = g.slice(af, 2 * t, 2)?;
            let lin = g.concat(&[ct, ca, aft])?;
            let z = g.affine(ps, self.ids.l1.0, self.ids.l1.1, lin)?;
            let a = g.tanh(z);
            outs.push(g.affine(ps, self.ids.l2.0, self.ids.l2.1, a)?);
        }
        let pred = g.concat(&outs)?;
        let levels: Vec<f64> = (0..l).flat_map(|_| cfg.quantiles.iter().copied()).collect();
        quantile_loss_node(&mut g, pred, target, &levels)?;
        Ok(MqrnnGraph { graph: g, pred })
    }

    /// Flat input buffers for one window; `target` may be empty for
    /// prediction.
    fn window_inputs(
        &self,
        history: &[f64],
        calendar: &Calendar,
        start: usize,
        target: &[f64],
        buf: &mut WindowBuf,
    ) -> f64 {
        let cfg = &self.config;
        let scale = window_scale(history);
        buf.xs.resize(history.len(), Vec::new());
        encoder_inputs(history, calendar, start, scale, &mut buf.xs);
        buf.af.clear();
        for t in 0..cfg.lookahead {
            let (y, w) = calendar.features_at(start + cfg.history_len + t);
            buf.af.extend_from_slice(&[y, w]);
        }
        buf.target.clear();
        for t in 0..cfg.lookahead {
            let v = target.get(t).map_or(0.0, |v| v / scale);
            buf.target.extend(std::iter::repeat(v).take(cfg.quantiles.len()));
        }
        scale
    }

    /// Trains on every window of the training split.
    pub fn train(dataset: &DemandDataset, config: MqrnnConfig) -> Result<Self> {
        let mut model = MqrnnModel::new(config)?;
        model.fit(dataset)?;
        Ok(model)
    }

    pub fn fit(&mut self, dataset: &DemandDataset) -> Result<()> {
        let cfg = self.config.clone();
        let (ll, l) = (cfg.history_len, cfg.lookahead);
        if dataset.train.is_empty() {
            return Err(Error::InvalidInput("training split is empty".into()));
        }
        if dataset.horizon() < ll + l {
            return Err(Error::InvalidInput(format!(
                "series of length {} are shorter than L + l = {}",
                dataset.horizon(),
                ll + l
            )));
        }
        let mut windows: Vec<(usize, usize)> = Vec::new();
        for &r in &dataset.train {
            let mut s = 0;
            while s + ll + l <= dataset.horizon() {
                windows.push((r, s));
                s += cfg.stride;
            }
        }
        let mut rng = rng_from_seed(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut net = self.build_graph()?;
        let mut adam = Adam::new(&self.params, cfg.lr);
        let mut buf = WindowBuf::default();
        let mut grads = self.params.zero_grads();
        for epoch in 0..cfg.epochs {
            adam.lr = decayed_lr(cfg.lr, epoch, cfg.epochs);
            shuffle(&mut windows, &mut rng);
            let mut total = 0.0;
            for (bi, batch) in windows.chunks(cfg.batch).enumerate() {
                grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
                let mut batch_loss = 0.0;
                for &(r, s) in batch {
                    let series = &dataset.sequences[r];
                    self.window_inputs(&series[s..s + ll], &dataset.calendar, s, &series[s + ll..s + ll + l], &mut buf);
                    net.graph.forward_slices(&self.params, &buf.slices())?;
                    batch_loss += net.graph.output_scalar();
                    net.graph.backward_into(&mut grads)?;
                }
                if !batch_loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: bi });
                }
                let inv = 1.0 / batch.len() as f64;
                grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= inv));
                adam.step(&mut self.params, &grads);
                total += batch_loss;
            }
            let mean = total / windows.len() as f64;
            log::debug!("mqrnn epoch {epoch}: loss {mean:.6}");
            self.loss_history.push(mean);
        }
        Ok(())
    }

    /// Forecasts periods `start .. start + l` from `history[i]`, the `L`
    /// demands preceding `start`.
    pub fn predict(&self, history: &[Vec<f64>], calendar: &Calendar, start: usize) -> Result<QuantileForecast> {
        let mut net = self.build_graph()?;
        self.predict_with(&mut net, history, calendar, start)
    }

    pub fn predict_with(
        &self,
        net: &mut MqrnnGraph,
        history: &[Vec<f64>],
        calendar: &Calendar,
        start: usize,
    ) -> Result<QuantileForecast> {
        let cfg = &self.config;
        let (ll, l, nb) = (cfg.history_len, cfg.lookahead, cfg.quantiles.len());
        if start < ll {
            return Err(Error::InvalidInput(format!("forecast start {start} precedes a full history of {ll}")));
        }
        let mut buf = WindowBuf::default();
        let mut values = Vec::with_capacity(history.len());
        for h in history {
            if h.len() != ll {
                return Err(Error::Shape(format!("history of length {} for a model with L = {ll}", h.len())));
            }
            let scale = self.window_inputs(h, calendar, start - ll, &[], &mut buf);
            net.graph.forward_slices(&self.params, &buf.slices())?;
            let p = net.graph.value(net.pred);
            values.push((0..l).map(|t| (0..nb).map(|b| p[t * nb + b] * scale).collect()).collect());
        }
        let mut f = QuantileForecast { levels: cfg.quantiles.clone(), values };
        f.repair();
        Ok(f)
    }

    pub fn to_json(&self) -> Result<String> {
        self.params.to_json(serde_json::json!({
            "model": "mqrnn",
            "config": self.config,
            "loss_history": self.loss_history,
        }))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let (config, loss_history) = checkpoint_meta::<MqrnnConfig>(text, "mqrnn")?;
        let mut m = MqrnnModel::new(config)?;
        m.params.load_json(text)?;
        m.loss_history = loss_history;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn checkpoint_meta<C: for<'de> Deserialize<'de>>(text: &str, kind: &str) -> Result<(C, Vec<f64>)> {
    #[derive(Deserialize)]
    struct Doc {
        #[serde(default)]
        meta: serde_json::Value,
    }
    let doc: Doc = serde_json::from_str(text)?;
    let found = doc.meta.get("model").and_then(|m| m.as_str()).unwrap_or("");
    if found != kind {
        return Err(Error::Format { expected: format!("{kind} checkpoint"), found: format!("{found:?} checkpoint") });
    }
    let config = serde_json::from_value(doc.meta.get("config").cloned().unwrap_or_default())?;
    let hist = serde_json::from_value(doc.meta.get("loss_history").cloned().unwrap_or_default()).unwrap_or_default();
    Ok((config, hist))
}

#[derive(Default)]
struct WindowBuf {
    xs: Vec<Vec<f64>>,
    af: Vec<f64>,
    target: Vec<f64>,
}

impl WindowBuf {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.xs.iter().map(Vec::as_slice).collect();
        if !self.af.is_empty() {
            v.push(&self.af);
        }
        v.push(&self.target);
        v
    }
}

/// Linear decay from `lr` to `lr / 10` over the run.
fn decayed_lr(lr: f64, epoch: usize, epochs: usize) -> f64 {
    let frac = if epochs > 1 { epoch as f64 / (epochs - 1) as f64 } else { 0.0 };
    lr * (1.0 - 0.9 * frac)
}

fn shuffle<T>(v: &mut [T], rng: &mut Rng) {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
}

// ----------------------------------------------------------------- LSTM

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub history_len: usize,
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub stride: usize,
    pub seed: u64,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig { history_len: 14, hidden: 32, lr: 1e-3, epochs: 30, batch: 64, stride: 1, seed: 0 }
    }
}

/// Normal fit of one-step forecast residuals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualFit {
    pub mean: f64,
    pub std: f64,
}

impl ResidualFit {
    /// Maximum-likelihood (population) moments.
    pub fn from_samples(e: &[f64]) -> Self {
        if e.is_empty() {
            return ResidualFit { mean: 0.0, std: 0.0 };
        }
        let n = e.len() as f64;
        let mean = e.iter().sum::<f64>() / n;
        let var = e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        ResidualFit { mean, std: var.sqrt() }
    }
}

/// One-step LSTM regressor with a linear head.
#[derive(Clone, Debug)]
pub struct LstmModel {
    pub config: LstmConfig,
    pub params: ParamStore,
    cell: LstmParams,
    head: (ParamId, ParamId),
    pub loss_history: Vec<f64>,
    /// Residual fits of the training retailers, keyed by dataset index.
    pub residuals: Vec<(usize, ResidualFit)>,
}

pub struct LstmGraph {
    pub graph: Graph,
    pub pred: NodeId,
}

impl LstmModel {
    pub fn new(config: LstmConfig) -> Result<Self> {
        if config.history_len == 0 || config.hidden == 0 || config.batch == 0 || config.stride == 0 {
            return Err(Error::InvalidInput("LSTM sizes must be positive".into()));
        }
        let mut rng = rng_from_seed(config.seed);
        let mut params = ParamStore::new();
        let cell = LstmParams::new(&mut params, "lstm", 3, config.hidden, &mut rng);
        let head = (
            params.add_uniform("head.w", 1, config.hidden, config.hidden, &mut rng),
            params.add_uniform("head.b", 1, 1, config.hidden, &mut rng),
        );
        Ok(LstmModel { config, params, cell, head, loss_history: Vec::new(), residuals: Vec::new() })
    }

    /// Inputs `x_0..x_{L-1}` and a scalar target; the last node is the
    /// squared error.
    pub fn build_graph(&self) -> Result<LstmGraph> {
        let hs = self.config.hidden;
        let mut g = Graph::new();
        let xs: Vec<NodeId> = (0..self.config.history_len).map(|_| g.input(3, 1)).collect();
        let target = g.input(1, 1);
        let mut h = g.constant(&Tensor::zeros(vec![hs, 1]));
        let mut c = g.constant(&Tensor::zeros(vec![hs, 1]));
        for &x in &xs {
            (h, c) = lstm_cell(&mut g, &self.params, &self.cell, x, h, c)?;
        }
        let pred = g.affine(&self.params, self.head.0, self.head.1, h)?;
        let d = g.sub(pred, target)?;
        let sq = g.mul(d, d)?;
        g.sum(sq);
        Ok(LstmGraph { graph: g, pred })
    }

    pub fn train(dataset: &DemandDataset, config: LstmConfig) -> Result<Self> {
        let mut m = LstmModel::new(config)?;
        m.fit(dataset)?;
        Ok(m)
    }

    pub fn fit(&mut self, dataset: &DemandDataset) -> Result<()> {
        let cfg = self.config.clone();
        let ll = cfg.history_len;
        if dataset.train.is_empty() || dataset.horizon() <= ll {
            return Err(Error::InvalidInput("LSTM training needs series longer than L".into()));
        }
        let mut windows = Vec::new();
        for &r in &dataset.train {
            let mut s = 0;
            while s + ll < dataset.horizon() {
                windows.push((r, s));
                s += cfg.stride;
            }
        }
        let mut rng = rng_from_seed(cfg.seed ^ 0x5851_f42d_4c95_7f2d);
        let mut net = self.build_graph()?;
        let mut adam = Adam::new(&self.params, cfg.lr);
        let mut xs: Vec<Vec<f64>> = Vec::new();
        let mut grads = self.params.zero_grads();
        for epoch in 0..cfg.epochs {
            adam.lr = decayed_lr(cfg.lr, epoch, cfg.epochs);
            shuffle(&mut windows, &mut rng);
            let mut total = 0.0;
            for (bi, batch) in windows.chunks(cfg.batch).enumerate() {
                grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
                let mut batch_loss = 0.0;
                for &(r, s) in batch {
                    let series = &dataset.sequences[r];
                    let h = &series[s..s + ll];
                    let scale = window_scale(h);
                    xs.resize(ll, Vec::new());
                    encoder_inputs(h, &dataset.calendar, s, scale, &mut xs);
                    let target = [series[s + ll] / scale];
                    let mut inputs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
                    inputs.push(&target);
                    net.graph.forward_slices(&self.params, &inputs)?;
                    batch_loss += net.graph.output_scalar();
                    net.graph.backward_into(&mut grads)?;
                }
                if !batch_loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: bi });
                }
                let inv = 1.0 / batch.len() as f64;
                grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= inv));
                adam.step(&mut self.params, &grads);
                total += batch_loss;
            }
            let mean = total / windows.len() as f64;
            log::debug!("lstm epoch {epoch}: loss {mean:.6}");
            self.loss_history.push(mean);
        }
        self.residuals = dataset
            .train
            .iter()
            .map(|&r| Ok((r, self.fit_residuals(&dataset.sequences[r], &dataset.calendar, 0)?)))
            .collect::<Result<_>>()?;
        Ok(())
    }

    fn step(&self, net: &mut LstmGraph, window: &[f64], calendar: &Calendar, start: usize, scale: f64) -> Result<f64> {
        let mut xs = vec![Vec::new(); window.len()];
        encoder_inputs(window, calendar, start, scale, &mut xs);
        let mut inputs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let zero = [0.0];
        inputs.push(&zero);
        net.graph.forward_slices(&self.params, &inputs)?;
        Ok((net.graph.value(net.pred)[0] * scale).max(0.0))
    }

    /// Recursive `l`-step forecast of periods `start ..` from the `L`
    /// demands preceding `start`; predictions are fed back as inputs.
    pub fn predict(&self, history: &[Vec<f64>], calendar: &Calendar, start: usize, l: usize) -> Result<Vec<Vec<f64>>> {
        let ll = self.config.history_len;
        if start < ll {
            return Err(Error::InvalidInput(format!("forecast start {start} precedes a full history of {ll}")));
        }
        let mut net = self.build_graph()?;
        history
            .iter()
            .map(|h| {
                if h.len() != ll {
                    return Err(Error::Shape(format!("history of length {} for a model with L = {ll}", h.len())));
                }
                let scale = window_scale(h);
                let mut w = h.clone();
                let mut out = Vec::with_capacity(l);
                for t in 0..l {
                    let y = self.step(&mut net, &w[t..t + ll], calendar, start - ll + t, scale)?;
                    out.push(y);
                    w.push(y);
                }
                Ok(out)
            })
            .collect()
    }

    /// Normal fit of one-step residuals `y - y_hat` over all windows of
    /// `series` whose calendar starts at `offset`.
    pub fn fit_residuals(&self, series: &[f64], calendar: &Calendar, offset: usize) -> Result<ResidualFit> {
        let ll = self.config.history_len;
        let mut net = self.build_graph()?;
        let mut e = Vec::new();
        for s in 0..series.len().saturating_sub(ll) {
            let h = &series[s..s + ll];
            let y = self.step(&mut net, h, calendar, offset + s, window_scale(h))?;
            e.push(series[s + ll] - y);
        }
        Ok(ResidualFit::from_samples(&e))
    }

    pub fn to_json(&self) -> Result<String> {
        self.params.to_json(serde_json::json!({
            "model": "lstm",
            "config": self.config,
            "loss_history": self.loss_history,
            "residuals": self.residuals,
        }))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let (config, loss_history) = checkpoint_meta::<LstmConfig>(text, "lstm")?;
        let mut m = LstmModel::new(config)?;
        let meta = m.params.load_json(text)?;
        m.loss_history = loss_history;
        m.residuals = serde_json::from_value(meta.get("residuals").cloned().unwrap_or_default()).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Point forecast plus i.i.d. residual draws, clamped at zero.
pub fn residual_scenarios(point: &[Vec<f64>], fits: &[ResidualFit], n: usize, seed: u64) -> Result<ScenarioSet> {
    if fits.len() != point.len() {
        return Err(Error::Shape("one residual fit per retailer is required".into()));
    }
    let mut rng = rng_from_seed(seed);
    let scenarios = (0..n.max(1))
        .map(|_| {
            point
                .iter()
                .zip(fits)
                .map(|(row, f)| {
                    row.iter()
                        .map(|&y| {
                            let e = if f.std > 0.0 { f.mean + f.std * std_normal(&mut rng) } else { f.mean };
                            (y + e).max(0.0)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    ScenarioSet::uniform(scenarios)
}

fn std_normal(rng: &mut Rng) -> f64 {
    rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
}

// ------------------------------------------------------------------ MLE

/// Candidate marginal distributions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case")]
pub enum Distribution {
    PointMass { value: f64 },
    Normal { mean: f64, std: f64 },
    Exponential { rate: f64 },
    LogNormal { mu: f64, sigma: f64 },
    /// Shifted gamma; mirrored when `skew < 0`.
    PearsonIII { mean: f64, std: f64, skew: f64 },
    Weibull { shape: f64, scale: f64 },
}

/// Skewness below which Pearson III is treated as Normal.
const PEARSON_MIN_SKEW: f64 = 1e-3;

impl Distribution {
    pub fn family(&self) -> &'static str {
        match self {
            Distribution::PointMass { .. } => "point_mass",
            Distribution::Normal { .. } => "normal",
            Distribution::Exponential { .. } => "exponential",
            Distribution::LogNormal { .. } => "log_normal",
            Distribution::PearsonIII { .. } => "pearson3",
            Distribution::Weibull { .. } => "weibull",
        }
    }

    fn pearson_gamma(mean: f64, std: f64, skew: f64) -> (Gamma, f64, f64) {
        let shape = 4.0 / (skew * skew);
        let scale = std * skew.abs() / 2.0;
        let loc = mean - 2.0 * std / skew;
        (Gamma::new(shape, 1.0 / scale).expect("positive gamma parameters"), loc, skew.signum())
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            Distribution::PointMass { value } => f64::from(x >= value),
            Distribution::Normal { mean, std } => Normal::new(mean, std).expect("valid normal").cdf(x),
            Distribution::Exponential { rate } => Exp::new(rate).expect("valid rate").cdf(x),
            Distribution::LogNormal { mu, sigma } => LogNormal::new(mu, sigma).expect("valid log-normal").cdf(x),
            Distribution::PearsonIII { mean, std, skew } => {
                if skew.abs() < PEARSON_MIN_SKEW {
                    return Normal::new(mean, std).expect("valid normal").cdf(x);
                }
                let (g, loc, sign) = Self::pearson_gamma(mean, std, skew);
                if sign > 0.0 {
                    g.cdf(x - loc)
                } else {
                    1.0 - g.cdf(loc - x)
                }
            }
            Distribution::Weibull { shape, scale } => Weibull::new(shape, scale).expect("valid weibull").cdf(x),
        }
    }

    pub fn inverse_cdf(&self, p: f64) -> f64 {
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        match *self {
            Distribution::PointMass { value } => value,
            Distribution::Normal { mean, std } => Normal::new(mean, std).expect("valid normal").inverse_cdf(p),
            Distribution::Exponential { rate } => -(1.0 - p).ln() / rate,
            Distribution::LogNormal { mu, sigma } => LogNormal::new(mu, sigma).expect("valid log-normal").inverse_cdf(p),
            Distribution::PearsonIII { mean, std, skew } => {
                if skew.abs() < PEARSON_MIN_SKEW {
                    return Normal::new(mean, std).expect("valid normal").inverse_cdf(p);
                }
                let (g, loc, sign) = Self::pearson_gamma(mean, std, skew);
                if sign > 0.0 {
                    loc + g.inverse_cdf(p)
                } else {
                    loc - g.inverse_cdf(1.0 - p)
                }
            }
            Distribution::Weibull { shape, scale } => scale * (-(1.0 - p).ln()).powf(1.0 / shape),
        }
    }

    /// One draw by inversion, clamped at zero.
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        let u: f64 = rng.random();
        self.inverse_cdf(u).max(0.0)
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Distribution::PointMass { value } => value,
            Distribution::Normal { mean, .. } | Distribution::PearsonIII { mean, .. } => mean,
            Distribution::Exponential { rate } => 1.0 / rate,
            Distribution::LogNormal { mu, sigma } => (mu + sigma * sigma / 2.0).exp(),
            Distribution::Weibull { shape, scale } => scale * statrs::function::gamma::gamma(1.0 + 1.0 / shape),
        }
    }
}

fn moments(x: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let skew = if std > 0.0 { x.iter().map(|v| ((v - mean) / std).powi(3)).sum::<f64>() / n } else { 0.0 };
    (mean, std, skew)
}

/// Weibull MLE: Newton on the profile equation for the shape.
pub fn weibull_mle(x: &[f64]) -> Option<(f64, f64)> {
    if x.is_empty() || x.iter().any(|&v| !(v > 0.0)) {
        return None;
    }
    let n = x.len() as f64;
    let logs: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let mean_log = logs.iter().sum::<f64>() / n;
    let sd_log = (logs.iter().map(|l| (l - mean_log).powi(2)).sum::<f64>() / n).sqrt();
    if sd_log <= 0.0 {
        return None;
    }
    let mut k = (1.2 / sd_log).clamp(0.05, 100.0);
    for _ in 0..100 {
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for (&v, &l) in x.iter().zip(&logs) {
            let p = v.powf(k);
            s0 += p;
            s1 += p * l;
            s2 += p * l * l;
        }
        let f = s1 / s0 - 1.0 / k - mean_log;
        let df = (s2 * s0 - s1 * s1) / (s0 * s0) + 1.0 / (k * k);
        let next = (k - f / df).clamp(k / 2.0, k * 2.0);
        if (next - k).abs() <= 1e-10 * k {
            k = next;
            break;
        }
        k = next;
    }
    let scale = (x.iter().map(|v| v.powf(k)).sum::<f64>() / n).powf(1.0 / k);
    (k.is_finite() && scale.is_finite()).then_some((k, scale))
}

/// Equal-probability bin count: `round(2 n^0.4)`, capped so every bin
/// expects at least five observations.
pub fn chi_square_bins(n: usize) -> usize {
    let rule = (2.0 * (n as f64).powf(0.4)).round() as usize;
    rule.min(n / 5).max(1)
}

/// Pearson statistic of `x` against `d` over `k` equal-probability bins.
pub fn chi_square(x: &[f64], d: &Distribution, k: usize) -> f64 {
    let n = x.len() as f64;
    let mut counts = vec![0usize; k];
    for &v in x {
        let u = d.cdf(v).clamp(0.0, 1.0);
        let b = ((u * k as f64) as usize).min(k - 1);
        counts[b] += 1;
    }
    let e = n / k as f64;
    counts.iter().map(|&o| (o as f64 - e).powi(2) / e).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MleFit {
    pub selected: Distribution,
    /// Every fitted candidate with its chi-square statistic.
    pub candidates: Vec<(Distribution, f64)>,
}

impl MleFit {
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        self.selected.sample(rng)
    }
}

/// Fits the five candidate families and keeps the smallest chi-square
/// statistic; ties go to the earlier family in the candidate order.
pub fn mle_fit(history: &[f64]) -> Result<MleFit> {
    if history.is_empty() || history.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("MLE fit needs a nonempty finite history".into()));
    }
    let (mean, std, skew) = moments(history);
    if std <= 0.0 {
        let d = Distribution::PointMass { value: mean.max(0.0) };
        return Ok(MleFit { selected: d, candidates: vec![(d, 0.0)] });
    }
    let mut cands = vec![Distribution::Normal { mean, std }];
    if history.iter().all(|&v| v >= 0.0) && mean > 0.0 {
        cands.push(Distribution::Exponential { rate: 1.0 / mean });
    }
    if history.iter().all(|&v| v > 0.0) {
        let logs: Vec<f64> = history.iter().map(|v| v.ln()).collect();
        let (mu, sigma, _) = moments(&logs);
        if sigma > 0.0 {
            cands.push(Distribution::LogNormal { mu, sigma });
        }
    }
    cands.push(Distribution::PearsonIII { mean, std, skew });
    if let Some((shape, scale)) = weibull_mle(history) {
        cands.push(Distribution::Weibull { shape, scale });
    }
    let k = chi_square_bins(history.len());
    let candidates: Vec<(Distribution, f64)> = cands.into_iter().map(|d| (d, chi_square(history, &d, k))).collect();
    let selected = candidates
        .iter()
        .fold(None::<&(Distribution, f64)>, |best, c| match best {
            Some(b) if b.1 <= c.1 => Some(b),
            _ => Some(c),
        })
        .expect("normal candidate always present")
        .0;
    Ok(MleFit { selected, candidates })
}

/// `n` scenarios drawing every `(i, t)` independently from retailer `i`'s
/// fitted marginal.
pub fn mle_scenarios(fits: &[MleFit], l: usize, n: usize, seed: u64) -> Result<ScenarioSet> {
    let mut rng = rng_from_seed(seed);
    let scenarios = (0..n.max(1))
        .map(|_| fits.iter().map(|f| (0..l).map(|_| f.sample(&mut rng)).collect()).collect())
        .collect();
    ScenarioSet::uniform(scenarios)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{CoordsBox, CycleForm, Pattern};

    fn forecast_from(values: Vec<Vec<Vec<f64>>>) -> QuantileForecast {
        QuantileForecast { levels: DEFAULT_QUANTILES.to_vec(), values }
    }

    fn dataset_from(series: Vec<Vec<f64>>) -> DemandDataset {
        let t = series[0].len();
        let n = series.len();
        DemandDataset {
            pattern: Pattern::Random,
            cycle_form: CycleForm::Printed,
            seed: 0,
            sequences: series,
            calendar: Calendar::leap_year(t),
            train: (0..n).collect(),
            test: Vec::new(),
            coords: vec![[0.0, 0.0]; n],
        }
    }

    fn small_mqrnn(epochs: usize) -> MqrnnConfig {
        MqrnnConfig {
            history_len: 7,
            lookahead: 2,
            encoder_hidden: 8,
            global_hidden: 16,
            context: 4,
            local_hidden: 8,
            lr: 1e-2,
            epochs,
            batch: 32,
            ..MqrnnConfig::default()
        }
    }

    #[test]
    fn zero_extra_gives_the_quantile_grids() {
        let row: Vec<f64> = (1..=9).map(f64::from).collect();
        let f = forecast_from(vec![vec![row.clone(), row]]);
        let s = sample_scenarios(&f, 0, 1).unwrap();
        assert_eq!(s.len(), 9);
        assert!(s.probabilities.iter().all(|&p| (p - 1.0 / 9.0).abs() < 1e-15));
        assert_eq!(s.scenarios[4], vec![vec![5.0, 5.0]]);
    }

    #[test]
    fn degenerate_forecast_gives_constant_scenarios() {
        let f = forecast_from(vec![vec![vec![3.5; 9]; 3]; 2]);
        let s = sample_scenarios(&f, 11, 4).unwrap();
        assert!(s.scenarios.iter().flatten().flatten().all(|&v| v == 3.5));
    }

    #[test]
    fn extra_scenarios_stay_in_the_quantile_range() {
        let mut rng = rng_from_seed(2);
        let mut f = forecast_from(
            (0..3).map(|_| (0..4).map(|_| (0..9).map(|_| rng.random_range(0.0..20.0)).collect()).collect()).collect(),
        );
        f.repair();
        let s = sample_scenarios(&f, 50, 3).unwrap();
        assert_eq!(s, sample_scenarios(&f, 50, 3).unwrap());
        assert_eq!(s.probabilities.iter().sum::<f64>(), 1.0);
        for sc in &s.scenarios[9..] {
            for (i, ts) in sc.iter().enumerate() {
                for (t, &v) in ts.iter().enumerate() {
                    assert!(v >= f.values[i][t][0] && v <= f.values[i][t][8]);
                }
            }
        }
    }

    #[test]
    fn uniform_probabilities_sum_to_one_exactly() {
        for n in 1..200 {
            assert_eq!(uniform_probabilities(n).iter().sum::<f64>(), 1.0, "n = {n}");
        }
    }

    #[test]
    fn mse_examples() {
        let a = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(forecast_mse(&a, &a).unwrap(), 0.0);
        let b: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v + 2.0).collect()).collect();
        assert_eq!(forecast_mse(&a, &b).unwrap(), 4.0);
        assert_eq!(forecast_mse(&[vec![0.0, 0.0]], &[vec![1.0, 3.0]]).unwrap(), 5.0);
        assert!(forecast_mse(&a, &[vec![1.0]]).is_err());
    }

    #[test]
    fn repair_sorts_and_clamps() {
        let mut f = forecast_from(vec![vec![vec![3.0, -1.0, 2.0, 0.0, 5.0, 4.0, 7.0, 6.0, 8.0]]]);
        f.repair();
        assert!(f.is_monotone());
        assert_eq!(f.values[0][0][0], 0.0);
    }

    #[test]
    fn zero_weights_give_equal_quantiles() {
        let mut m = MqrnnModel::new(small_mqrnn(0)).unwrap();
        for k in 0..m.params.len() {
            m.params.get_mut(k).values.iter_mut().for_each(|v| *v = 0.0);
        }
        let cal = Calendar::leap_year(40);
        let f = m.predict(&[vec![5.0; 7], vec![1.0; 7]], &cal, 10).unwrap();
        for row in f.values.iter().flatten() {
            assert!(row.iter().all(|&v| v == row[0]));
        }
    }

    #[test]
    fn prediction_is_monotone_and_deterministic() {
        let m = MqrnnModel::new(small_mqrnn(0)).unwrap();
        let cal = Calendar::leap_year(40);
        let h = vec![vec![4.0, 9.0, 1.0, 0.0, 3.0, 12.0, 5.0]];
        let f = m.predict(&h, &cal, 20).unwrap();
        assert!(f.is_monotone());
        assert_eq!(f, m.predict(&h, &cal, 20).unwrap());
        assert!(m.predict(&[vec![1.0; 3]], &cal, 20).is_err());
    }

    #[test]
    fn mqrnn_learns_a_constant() {
        let ds = dataset_from(vec![vec![6.0; 60]; 4]);
        let m = MqrnnModel::train(&ds, MqrnnConfig { lr: 3e-3, ..small_mqrnn(150) }).unwrap();
        let f = m.predict(&[vec![6.0; 7]], &ds.calendar, 30).unwrap();
        for &v in f.values.iter().flatten().flatten() {
            assert!((v - 6.0).abs() <= 0.1, "quantile {v}");
        }
    }

    #[test]
    fn mqrnn_median_of_uniform_noise() {
        let mut rng = rng_from_seed(11);
        let series: Vec<Vec<f64>> =
            (0..10).map(|_| (0..120).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        let ds = dataset_from(series);
        let m = MqrnnModel::train(&ds, small_mqrnn(15)).unwrap();
        let hist: Vec<Vec<f64>> = (0..50).map(|_| (0..7).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        let f = m.predict(&hist, &ds.calendar, 60).unwrap();
        let med = f.median();
        let avg = med.iter().flatten().sum::<f64>() / (med.len() * 2) as f64;
        assert!((avg - 5.0).abs() <= 1.0, "median {avg}");
        let hist = &m.loss_history;
        let smooth: Vec<f64> = hist.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
        for w in smooth.windows(2) {
            assert!(w[1] <= w[0] * 1.05, "loss rose: {hist:?}");
        }
    }

    #[test]
    fn mqrnn_checkpoint_round_trip() {
        let m = MqrnnModel::new(small_mqrnn(0)).unwrap();
        let back = MqrnnModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.config, m.config);
        let cal = Calendar::leap_year(40);
        let h = vec![vec![2.0; 7]];
        assert_eq!(m.predict(&h, &cal, 9).unwrap(), back.predict(&h, &cal, 9).unwrap());
        assert!(LstmModel::from_json(&m.to_json().unwrap()).is_err());
    }

    #[test]
    fn lstm_learns_a_constant() {
        let ds = dataset_from(vec![vec![4.0; 60]; 4]);
        let cfg = LstmConfig { history_len: 7, hidden: 8, lr: 1e-2, epochs: 40, batch: 16, ..LstmConfig::default() };
        let m = LstmModel::train(&ds, cfg).unwrap();
        let p = m.predict(&[vec![4.0; 7]], &ds.calendar, 30, 5).unwrap();
        for &v in &p[0] {
            assert!((v - 4.0).abs() <= 0.2, "forecast {v}");
        }
        assert_eq!(m.residuals.len(), 4);
        let back = LstmModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.predict(&[vec![4.0; 7]], &ds.calendar, 30, 5).unwrap(), p);
    }

    #[test]
    fn residual_moments() {
        // Moment oracle on N(1, 4) draws.
        let mut rng = rng_from_seed(5);
        let e: Vec<f64> = (0..10_000).map(|_| 1.0 + 2.0 * std_normal(&mut rng)).collect();
        let fit = ResidualFit::from_samples(&e);
        assert!((fit.mean - 1.0).abs() <= 0.1 && (fit.std - 2.0).abs() <= 0.1);
    }

    #[test]
    fn zero_residual_spread_repeats_the_point_forecast() {
        let point = vec![vec![3.0, 4.0], vec![0.5, 1.0]];
        let fits = vec![ResidualFit { mean: 0.0, std: 0.0 }; 2];
        let s = residual_scenarios(&point, &fits, 5, 0).unwrap();
        assert!(s.scenarios.iter().all(|sc| *sc == point));
    }

    #[test]
    fn normal_mle_is_the_sample_moments() {
        let x = [2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0];
        let fit = mle_fit(&x).unwrap();
        assert_eq!(fit.candidates[0].0, Distribution::Normal { mean: 5.0, std: 2.0 });
    }

    #[test]
    fn constant_history_is_a_point_mass() {
        let fit = mle_fit(&[3.0; 14]).unwrap();
        assert_eq!(fit.selected, Distribution::PointMass { value: 3.0 });
        assert_eq!(mle_fit(&[0.0; 14]).unwrap().selected, Distribution::PointMass { value: 0.0 });
        let mut rng = rng_from_seed(0);
        assert_eq!(fit.sample(&mut rng), 3.0);
        assert!(mle_fit(&[]).is_err());
    }

    #[test]
    fn selected_has_the_smallest_statistic() {
        let mut rng = rng_from_seed(8);
        for _ in 0..20 {
            let x: Vec<f64> = (0..80).map(|_| rng.random_range(0.5..10.0)).collect();
            let fit = mle_fit(&x).unwrap();
            let best = fit.candidates.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
            let sel = fit.candidates.iter().find(|c| c.0 == fit.selected).unwrap().1;
            assert_eq!(sel, best);
            assert_eq!(fit.candidates.len(), 5);
        }
    }

    #[test]
    fn weibull_mle_recovers_parameters() {
        let d = Distribution::Weibull { shape: 2.0, scale: 3.0 };
        let mut rng = rng_from_seed(4);
        let x: Vec<f64> = (0..20_000).map(|_| d.sample(&mut rng)).collect();
        let (k, s) = weibull_mle(&x).unwrap();
        assert!((k - 2.0).abs() < 0.05 && (s - 3.0).abs() < 0.05, "{k} {s}");
    }

    #[test]
    fn inverse_cdf_inverts_cdf() {
        let ds = [
            Distribution::Normal { mean: 2.0, std: 1.5 },
            Distribution::Exponential { rate: 0.5 },
            Distribution::LogNormal { mu: 0.3, sigma: 0.4 },
            Distribution::PearsonIII { mean: 5.0, std: 2.0, skew: 0.8 },
            Distribution::PearsonIII { mean: 5.0, std: 2.0, skew: -0.8 },
            Distribution::Weibull { shape: 1.7, scale: 4.0 },
        ];
        for d in ds {
            for p in [0.05, 0.3, 0.5, 0.9] {
                assert!((d.cdf(d.inverse_cdf(p)) - p).abs() < 1e-6, "{d:?} at {p}");
            }
        }
    }

    #[test]
    fn distribution_json_is_family_and_params() {
        let text = serde_json::to_string(&Distribution::Exponential { rate: 2.0 }).unwrap();
        assert_eq!(text, r#"{"family":"exponential","params":{"rate":2.0}}"#);
    }

    #[test]
    fn chi_square_bins_keep_five_expected() {
        assert_eq!(chi_square_bins(14), 2);
        assert_eq!(chi_square_bins(500), 24);
        for n in 5..1000 {
            assert!(n as f64 / chi_square_bins(n) as f64 >= 5.0);
        }
    }

    #[test]
    fn generated_dataset_trains() {
        let ds = DemandDataset::generate(Pattern::Both, 6, 40, 3, CycleForm::Printed, CoordsBox::default()).unwrap();
        let m = MqrnnModel::train(&ds, small_mqrnn(2)).unwrap();
        assert_eq!(m.loss_history.len(), 2);
        assert!(m.loss_history.iter().all(|l| l.is_finite()));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn scenarios_are_valid(seed in 0u64..10_000, n_extra in 0usize..30) {
                let mut rng = rng_from_seed(seed);
                let mut f = forecast_from(
                    (0..2).map(|_| (0..3).map(|_| (0..9).map(|_| rng.random_range(-2.0..15.0)).collect()).collect()).collect(),
                );
                f.repair();
                prop_assert!(f.is_monotone());
                let s = sample_scenarios(&f, n_extra, seed).unwrap();
                prop_assert_eq!(s.len(), 9 + n_extra);
                prop_assert_eq!(s.probabilities.iter().sum::<f64>(), 1.0);
                prop_assert!(s.validate().is_ok());
            }

            #[test]
            fn mle_selection_is_minimal(seed in 0u64..10_000) {
                let mut rng = rng_from_seed(seed);
                let x: Vec<f64> = (0..14).map(|_| rng.random_range(0.0..20.0)).collect();
                let fit = mle_fit(&x).unwrap();
                let sel = fit.candidates.iter().find(|c| c.0 == fit.selected).unwrap().1;
                prop_assert!(fit.candidates.iter().all(|c| sel <= c.1));
            }
        }
    }
}
