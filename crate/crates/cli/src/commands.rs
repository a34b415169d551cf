use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use scpo_core::datagen::{build_instances, make_instance, CoordsBox, DemandDataset, InstanceDefaults};
use scpo_core::forecast::{LstmConfig, LstmModel, MqrnnConfig, MqrnnModel};
use scpo_core::model::Instance;
use scpo_core::sim::{format_table, run_experiment, Case, EpisodeData, Forecasters, Policy, PolicyKind, Predictor, SimReport, TimingRow};
use scpo_core::sirp::{MatheuristicConfig, PhaParams};

use crate::config::RunConfig;
use crate::CliError;

pub const DATASET_FILE: &str = "dataset.json";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const TRAINING_LOG: &str = "training-log.csv";

/// Run metadata that would break byte-identical artifacts.
#[derive(Serialize)]
struct Sidecar<'a> {
    command: &'a str,
    started_unix: u64,
    finished_unix: u64,
    host: String,
    args: Vec<String>,
    config: &'a RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    times: Option<&'a [TimingRow]>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn host() -> String {
    std::env::var("HOSTNAME")
        .ok()
        .or_else(|| std::fs::read_to_string("/etc/hostname").ok().map(|s| s.trim().to_string()))
        .unwrap_or_default()
}

fn write_sidecar(
    path: &Path,
    command: &str,
    started: u64,
    cfg: &RunConfig,
    times: Option<&[TimingRow]>,
) -> Result<(), CliError> {
    let meta = Sidecar {
        command,
        started_unix: started,
        finished_unix: now(),
        host: host(),
        args: std::env::args().collect(),
        config: cfg,
        times,
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| CliError::new("E_FORMAT", e.to_string()))?;
    write(path, &text)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("cannot create {}: {e}", dir.display())))
}

fn load_dataset(cfg: &RunConfig) -> Result<DemandDataset, CliError> {
    let path = cfg.data_dir.join(DATASET_FILE);
    if !path.exists() {
        return Err(CliError::io(format!("dataset {} not found; run `scpo gen` first", path.display())));
    }
    Ok(DemandDataset::load(&path)?)
}

fn instance_file(g: usize) -> String {
    format!("instance-{g}.json")
}

fn mqrnn_file(l: usize) -> String {
    format!("mqrnn-l{l}.json")
}

/// `instance-<g>.json` files of a directory in group order.
fn instance_paths(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(format!("cannot list {}: {e}", dir.display())))?;
    let mut found: Vec<(usize, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let g = name.strip_prefix("instance-")?.strip_suffix(".json")?.parse().ok()?;
            Some((g, e.path()))
        })
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(CliError::io(format!("no instance files in {}", dir.display())));
    }
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

pub fn gen(cfg: &RunConfig) -> Result<(), CliError> {
    let started = now();
    let pattern = cfg.pattern.parse().map_err(|e: scpo_core::Error| CliError::config(e.to_string()))?;
    let form = cfg.cycle_form.parse().map_err(|e: scpo_core::Error| CliError::config(e.to_string()))?;
    let ds = DemandDataset::generate(pattern, cfg.retailers, cfg.horizon, cfg.seed, form, CoordsBox::default())?;
    let groups = build_instances(&ds, cfg.groups, cfg.group_size, cfg.seed)?;
    let defaults = InstanceDefaults {
        n_vehicles: cfg.vehicles,
        holding_cost: cfg.holding_cost,
        backorder_cost: cfg.backorder_cost,
        transport_scale: cfg.transport_scale,
        history_len: cfg.history_len,
        lookahead: cfg.lookahead,
        eval_horizon: cfg.eval_horizon,
    };
    create_dir(&cfg.data_dir)?;
    ds.save(cfg.data_dir.join(DATASET_FILE))?;
    let all: Vec<f64> = ds.sequences.iter().flatten().copied().collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
    let max = all.iter().copied().fold(0.0, f64::max);
    println!(
        "dataset: {} series x {} periods, pattern {}, train {} / test {}",
        ds.len(),
        ds.horizon(),
        ds.pattern,
        ds.train.len(),
        ds.test.len()
    );
    println!("demand: mean {mean:.3}, std {std:.3}, max {max:.3}, train mean {:.3}", ds.train_mean());
    for (g, group) in groups.iter().enumerate() {
        let inst = make_instance(&ds, group, &defaults, cfg.seed)?;
        inst.save(cfg.data_dir.join(instance_file(g)))?;
        println!(
            "instance {g}: retailers {:?}, vehicles {}, Q {}, Imax {}",
            group, inst.n_vehicles, inst.vehicle_capacity, inst.inv_capacity
        );
    }
    write_sidecar(&cfg.data_dir.join("meta-gen.json"), "gen", started, cfg, None)
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let started = now();
    let ds = load_dataset(cfg)?;
    create_dir(&cfg.model_dir)?;
    let mut log = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::new("E_FORMAT", e.to_string());
    log.write_record(["model", "lookahead", "epoch", "loss"]).map_err(csv_err)?;
    if cfg.models.iter().any(|m| m == "mqrnn") {
        for &l in &cfg.lookaheads {
            let mc = MqrnnConfig {
                history_len: cfg.history_len,
                lookahead: l,
                lr: cfg.lr,
                epochs: cfg.mqrnn_epochs,
                batch: cfg.batch,
                stride: cfg.stride,
                seed: cfg.seed,
                ..MqrnnConfig::default()
            };
            log::info!("training MQRNN with lookahead {l}");
            let m = MqrnnModel::train(&ds, mc)?;
            for (e, loss) in m.loss_history.iter().enumerate() {
                log.write_record(["mqrnn".into(), l.to_string(), e.to_string(), loss.to_string()]).map_err(csv_err)?;
            }
            m.save(cfg.model_dir.join(mqrnn_file(l)))?;
            println!("mqrnn l={l}: final loss {:.6}", m.loss_history.last().copied().unwrap_or(f64::NAN));
        }
    }
    if cfg.models.iter().any(|m| m == "lstm") {
        let lc = LstmConfig {
            history_len: cfg.history_len,
            lr: cfg.lr,
            epochs: cfg.lstm_epochs,
            batch: cfg.batch,
            stride: cfg.stride,
            seed: cfg.seed,
            ..LstmConfig::default()
        };
        log::info!("training LSTM");
        let m = LstmModel::train(&ds, lc)?;
        for (e, loss) in m.loss_history.iter().enumerate() {
            log.write_record(["lstm".into(), String::new(), e.to_string(), loss.to_string()]).map_err(csv_err)?;
        }
        m.save(cfg.model_dir.join("lstm.json"))?;
        println!("lstm: final loss {:.6}", m.loss_history.last().copied().unwrap_or(f64::NAN));
    }
    let bytes = log.into_inner().map_err(|e| CliError::io(e.to_string()))?;
    write(&cfg.model_dir.join(TRAINING_LOG), &String::from_utf8_lossy(&bytes))?;
    write_sidecar(&cfg.model_dir.join("meta-train.json"), "train", started, cfg, None)
}

/// Loads the checkpoints the policies need.
fn load_models(cfg: &RunConfig, kinds: &[PolicyKind]) -> Result<Forecasters, CliError> {
    let needs = |p: Predictor| kinds.iter().any(|k| k.predictor() == Some(p));
    let mut models = Forecasters::default();
    if needs(Predictor::Mqrnn) {
        let path = cfg.mqrnn.clone().unwrap_or_else(|| cfg.model_dir.join(mqrnn_file(cfg.lookahead)));
        if !path.exists() {
            return Err(CliError::io(format!("MQRNN checkpoint {} not found", path.display())));
        }
        models.mqrnn = Some(MqrnnModel::load(&path)?);
    }
    if needs(Predictor::Lstm) {
        let path = cfg.lstm.clone().unwrap_or_else(|| cfg.model_dir.join("lstm.json"));
        if !path.exists() {
            return Err(CliError::io(format!("LSTM checkpoint {} not found", path.display())));
        }
        models.lstm = Some(LstmModel::load(&path)?);
    }
    Ok(models)
}

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let started = now();
    let ds = load_dataset(cfg)?;
    let kinds: Vec<PolicyKind> =
        cfg.policies.iter().map(|p| p.parse()).collect::<Result<_, scpo_core::Error>>()?;
    let models = Arc::new(load_models(cfg, &kinds)?);
    let matheuristic = MatheuristicConfig {
        node_limit: cfg.node_limit,
        time_limit: (cfg.time_limit > 0.0).then_some(cfg.time_limit),
        gap_tol: cfg.gap_tol,
    };
    let pha = PhaParams {
        rho0: cfg.rho0,
        beta_d: cfg.beta_d,
        beta_p: cfg.beta_p,
        beta0: cfg.beta0,
        eps: cfg.eps,
        max_iter: cfg.max_iter,
        parallel: true,
        matheuristic: matheuristic.clone(),
    };
    let policies: Vec<Policy> = kinds
        .iter()
        .map(|&k| Policy { matheuristic: matheuristic.clone(), pha: pha.clone(), ..Policy::new(k).with_scenarios(cfg.scenarios) })
        .collect();

    let mut cases = Vec::new();
    for path in instance_paths(&cfg.data_dir)? {
        let mut inst = Instance::load(&path)?;
        inst.lookahead = cfg.lookahead;
        inst.history_len = cfg.history_len;
        inst.eval_horizon = cfg.eval_horizon;
        inst.validate()?;
        let data = EpisodeData::from_dataset(&ds, &inst)
            .map_err(|e| CliError::new("E_SHAPE", format!("{}: {e}", path.display())))?;
        for k in &kinds {
            models.check(k, &inst)?;
        }
        for s in 0..cfg.seeds as u64 {
            cases.push(Case {
                pattern: ds.pattern,
                instance: inst.clone(),
                data: data.clone(),
                seed: cfg.seed + s,
                models: models.clone(),
            });
        }
    }
    log::info!("running {} episodes", cases.len() * policies.len());
    let report = run_experiment(&cases, &policies)?;
    create_dir(&cfg.out_dir)?;
    report.save(cfg.out_dir.join(REPORT_FILE))?;
    write(&cfg.out_dir.join(REPORT_CSV), &report.to_csv()?)?;
    write_sidecar(&cfg.out_dir.join(sidecar_name(REPORT_FILE)), "run", started, cfg, Some(&report.times))?;
    print!("{}", format_table(&report.rows, &report.times));
    Ok(())
}

/// `report.json` -> `report.meta.json`.
fn sidecar_name(file: &str) -> String {
    match file.strip_suffix(".json") {
        Some(stem) => format!("{stem}.meta.json"),
        None => format!("{file}.meta.json"),
    }
}

fn sidecar_times(report: &Path) -> Vec<TimingRow> {
    let Some(name) = report.file_name().and_then(|n| n.to_str()) else { return Vec::new() };
    let path = report.with_file_name(sidecar_name(name));
    std::fs::read_to_string(path)
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| serde_json::from_value(v.get("times")?.clone()).ok())
        .unwrap_or_default()
}

pub fn report(files: &[PathBuf]) -> Result<(), CliError> {
    let mut rows = Vec::new();
    let mut times = Vec::new();
    for f in files {
        let r = SimReport::load(f).map_err(|e| CliError::from(e).prefixed(f))?;
        rows.extend(r.rows);
        times.extend(sidecar_times(f));
    }
    print!("{}", format_table(&rows, &times));
    Ok(())
}

impl CliError {
    fn prefixed(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}
