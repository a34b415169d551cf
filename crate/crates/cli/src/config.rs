//! Flat run configuration: built-in defaults, overlaid by an optional TOML
//! file, overlaid by command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use scpo_core::datagen::{CycleForm, Pattern};
use scpo_core::sim::PolicyKind;

use crate::CliError;

/// Environment variable that replaces the built-in default seed.
pub const SEED_ENV: &str = "SCPO_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// `trend`, `random` or `both`.
    pub pattern: String,
    /// `printed` or `conventional` seasonal term.
    pub cycle_form: String,
    pub retailers: usize,
    pub horizon: usize,
    pub groups: usize,
    pub group_size: usize,
    pub vehicles: usize,
    pub history_len: usize,
    pub lookahead: usize,
    /// Lookaheads to train one MQRNN for.
    pub lookaheads: Vec<usize>,
    pub eval_horizon: usize,
    pub holding_cost: f64,
    pub backorder_cost: f64,
    pub transport_scale: f64,
    /// Models trained by `train`: any of `mqrnn`, `lstm`.
    pub models: Vec<String>,
    pub mqrnn_epochs: usize,
    pub lstm_epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub stride: usize,
    pub policies: Vec<String>,
    /// Episode seeds per instance, `seed .. seed + seeds`.
    pub seeds: usize,
    pub scenarios: usize,
    pub node_limit: usize,
    /// Seconds per MILP; 0 disables the cap.
    pub time_limit: f64,
    pub gap_tol: f64,
    pub rho0: f64,
    pub beta_d: f64,
    pub beta_p: f64,
    pub beta0: f64,
    pub eps: f64,
    pub max_iter: usize,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub data_dir: PathBuf,
    pub model_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Explicit MQRNN checkpoint instead of `model_dir/mqrnn-l<lookahead>.json`.
    pub mqrnn: Option<PathBuf>,
    /// Explicit LSTM checkpoint instead of `model_dir/lstm.json`.
    pub lstm: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            pattern: "both".into(),
            cycle_form: "printed".into(),
            retailers: 60,
            horizon: 366,
            groups: 3,
            group_size: 5,
            vehicles: 2,
            history_len: 14,
            lookahead: 5,
            lookaheads: vec![5, 7, 10],
            eval_horizon: 30,
            holding_cost: 0.3,
            backorder_cost: 3.0,
            transport_scale: 0.05,
            models: vec!["mqrnn".into(), "lstm".into()],
            mqrnn_epochs: 30,
            lstm_epochs: 30,
            lr: 1e-3,
            batch: 64,
            stride: 1,
            policies: ["pi", "ev", "emp", "pto:mqrnn", "scpo-ss:mqrnn"].map(String::from).to_vec(),
            seeds: 1,
            scenarios: 20,
            node_limit: 2000,
            time_limit: 10.0,
            gap_tol: 1e-4,
            rho0: 0.001,
            beta_d: 1.05,
            beta_p: 1.05,
            beta0: 1.2,
            eps: 0.1,
            max_iter: 50,
            jobs: 0,
            data_dir: "data".into(),
            model_dir: "models".into(),
            out_dir: "results".into(),
            mqrnn: None,
            lstm: None,
        }
    }
}

/// Flags shared by every command; each one, when given, replaces the value
/// from the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// Flat TOML file with `RunConfig` keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_as::<Pattern>)]
    pub pattern: Option<String>,
    #[arg(long, global = true, value_parser = parse_as::<CycleForm>)]
    pub cycle_form: Option<String>,
    #[arg(long, global = true)]
    pub retailers: Option<usize>,
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
    #[arg(long, global = true)]
    pub groups: Option<usize>,
    #[arg(long, global = true)]
    pub group_size: Option<usize>,
    #[arg(long, global = true)]
    pub vehicles: Option<usize>,
    #[arg(long, global = true)]
    pub history_len: Option<usize>,
    #[arg(long, global = true)]
    pub lookahead: Option<usize>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub lookaheads: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub eval_horizon: Option<usize>,
    #[arg(long, global = true)]
    pub holding_cost: Option<f64>,
    #[arg(long, global = true)]
    pub backorder_cost: Option<f64>,
    #[arg(long, global = true)]
    pub transport_scale: Option<f64>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub models: Option<Vec<String>>,
    #[arg(long, global = true)]
    pub mqrnn_epochs: Option<usize>,
    #[arg(long, global = true)]
    pub lstm_epochs: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    #[arg(long, global = true)]
    pub stride: Option<usize>,
    #[arg(long, global = true, value_delimiter = ',', value_parser = parse_as::<PolicyKind>)]
    pub policies: Option<Vec<String>>,
    #[arg(long, global = true)]
    pub seeds: Option<usize>,
    #[arg(long, global = true)]
    pub scenarios: Option<usize>,
    #[arg(long, global = true)]
    pub node_limit: Option<usize>,
    #[arg(long, global = true)]
    pub time_limit: Option<f64>,
    #[arg(long, global = true)]
    pub gap_tol: Option<f64>,
    #[arg(long, global = true)]
    pub rho0: Option<f64>,
    #[arg(long, global = true)]
    pub beta_d: Option<f64>,
    #[arg(long, global = true)]
    pub beta_p: Option<f64>,
    #[arg(long, global = true)]
    pub beta0: Option<f64>,
    #[arg(long, global = true)]
    pub eps: Option<f64>,
    #[arg(long, global = true)]
    pub max_iter: Option<usize>,
    /// Worker threads for episodes and PHA subproblems (0 = all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub model_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub mqrnn: Option<PathBuf>,
    #[arg(long, global = true)]
    pub lstm: Option<PathBuf>,
}

/// Checks that a flag value parses as `T`, keeping its text.
fn parse_as<T: std::str::FromStr>(s: &str) -> Result<String, String>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map(|_| s.to_string()).map_err(|e| e.to_string())
}

macro_rules! overlay {
    ($cfg:ident, $o:ident; $($f:ident),* $(,)?) => {
        $( if let Some(v) = $o.$f.clone() { $cfg.$f = v; } )*
    };
}

impl RunConfig {
    /// Defaults (with `SCPO_SEED`), then the config file, then the flags.
    pub fn resolve(o: &Overrides) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s.trim().parse().map_err(|_| CliError::config(format!("{SEED_ENV}={s:?} is not a seed")))?;
        }
        if let Some(path) = &o.config {
            cfg = cfg.with_file(path)?;
        }
        overlay!(cfg, o; seed, pattern, cycle_form, retailers, horizon, groups, group_size, vehicles,
            history_len, lookahead, lookaheads, eval_horizon, holding_cost, backorder_cost, transport_scale,
            models, mqrnn_epochs, lstm_epochs, lr, batch, stride, policies, seeds, scenarios, node_limit,
            time_limit, gap_tol, rho0, beta_d, beta_p, beta0, eps, max_iter, jobs, data_dir, model_dir, out_dir);
        if o.mqrnn.is_some() {
            cfg.mqrnn = o.mqrnn.clone();
        }
        if o.lstm.is_some() {
            cfg.lstm = o.lstm.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overlays the keys present in a TOML file; absent keys keep their
    /// current values.
    fn with_file(self, path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
        let file: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut base = toml::Table::try_from(&self).map_err(|e| CliError::config(e.to_string()))?;
        for (k, v) in file {
            base.insert(k, v);
        }
        toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::config(m));
        self.pattern.parse::<Pattern>().map_err(|e| CliError::config(e.to_string()))?;
        self.cycle_form.parse::<CycleForm>().map_err(|e| CliError::config(e.to_string()))?;
        for (name, v) in [
            ("retailers", self.retailers),
            ("horizon", self.horizon),
            ("groups", self.groups),
            ("group_size", self.group_size),
            ("vehicles", self.vehicles),
            ("history_len", self.history_len),
            ("lookahead", self.lookahead),
            ("eval_horizon", self.eval_horizon),
            ("batch", self.batch),
            ("stride", self.stride),
            ("seeds", self.seeds),
            ("scenarios", self.scenarios),
            ("node_limit", self.node_limit),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.lookahead > self.history_len || self.lookaheads.iter().any(|&l| l == 0 || l > self.history_len) {
            return bad(format!("lookaheads must lie in 1..={} (history_len)", self.history_len));
        }
        if self.groups * self.group_size > self.retailers {
            return bad(format!("{} groups of {} exceed {} retailers", self.groups, self.group_size, self.retailers));
        }
        for (name, v) in [
            ("holding_cost", self.holding_cost),
            ("backorder_cost", self.backorder_cost),
            ("transport_scale", self.transport_scale),
            ("time_limit", self.time_limit),
            ("gap_tol", self.gap_tol),
            ("eps", self.eps),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and nonnegative"));
            }
        }
        for (name, v) in [("lr", self.lr), ("rho0", self.rho0), ("beta_d", self.beta_d), ("beta_p", self.beta_p), ("beta0", self.beta0)] {
            if !v.is_finite() || v <= 0.0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for m in &self.models {
            if m != "mqrnn" && m != "lstm" {
                return bad(format!("unknown model {m:?} (mqrnn|lstm)"));
            }
        }
        for p in &self.policies {
            p.parse::<PolicyKind>().map_err(|e| CliError::config(e.to_string()))?;
        }
        Ok(())
    }
}
