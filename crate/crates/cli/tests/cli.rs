use std::path::Path;
use std::process::{Command, Output};

fn scpo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scpo"))
        .current_dir(dir)
        .env_remove("SCPO_SEED")
        .args(args)
        .output()
        .expect("spawn scpo")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

const GEN: &[&str] = &["gen", "--pattern", "both", "--retailers", "16", "--groups", "1", "--group-size", "3", "--seed", "7"];
const TRAIN: &[&str] = &["train", "--lookaheads", "3", "--mqrnn-epochs", "4", "--lstm-epochs", "3", "--stride", "5"];

fn gen_into(dir: &Path, data: &str) {
    let mut args = GEN.to_vec();
    args.extend(["--data-dir", data]);
    ok(scpo(dir, &args));
}

#[test]
fn gen_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    gen_into(dir.path(), "a");
    gen_into(dir.path(), "b");
    for f in ["dataset.json", "instance-0.json"] {
        assert_eq!(read(dir.path().join("a").join(f)), read(dir.path().join("b").join(f)), "{f}");
    }
    assert!(read(dir.path().join("a/dataset.json")).contains("scpo-dataset-v1"));
    assert!(read(dir.path().join("a/instance-0.json")).contains("scpo-instance-v1"));
    assert!(read(dir.path().join("a/meta-gen.json")).contains("started_unix"));
}

#[test]
fn seed_env_replaces_the_default_seed() {
    let dir = tempfile::tempdir().unwrap();
    gen_into(dir.path(), "flag");
    let out = Command::new(env!("CARGO_BIN_EXE_scpo"))
        .current_dir(dir.path())
        .env("SCPO_SEED", "7")
        .args(["gen", "--pattern", "both", "--retailers", "16", "--groups", "1", "--group-size", "3", "--data-dir", "env"])
        .output()
        .unwrap();
    ok(out);
    assert_eq!(read(dir.path().join("flag/dataset.json")), read(dir.path().join("env/dataset.json")));
}

#[test]
fn bogus_pattern_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = scpo(dir.path(), &["gen", "--pattern", "bogus"]);
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[E_USAGE]"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "retailers = 16\ngroups = 1\ngroup_size = 3\nseed = 7\npattern = \"random\"\n")
        .unwrap();
    ok(scpo(dir.path(), &["gen", "--config", "c.toml", "--pattern", "both", "--data-dir", "cfg"]));
    gen_into(dir.path(), "flags");
    assert_eq!(read(dir.path().join("cfg/dataset.json")), read(dir.path().join("flags/dataset.json")));

    std::fs::write(dir.path().join("bad.toml"), "no_such_key = 1\n").unwrap();
    let out = scpo(dir.path(), &["gen", "--config", "bad.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[E_CONFIG]"));
}

#[test]
fn train_without_dataset_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = scpo(dir.path(), &["train", "--data-dir", "missing"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[E_IO]"));
}

#[test]
fn train_run_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_into(d, "data");
    for m in ["m1", "m2"] {
        let mut args = TRAIN.to_vec();
        args.extend(["--model-dir", m]);
        ok(scpo(d, &args));
    }
    for f in ["mqrnn-l3.json", "lstm.json", "training-log.csv"] {
        assert_eq!(read(d.join("m1").join(f)), read(d.join("m2").join(f)), "{f}");
    }
    assert!(read(d.join("m1/mqrnn-l3.json")).contains("scpo-weights-v1"));

    // Each epoch's loss stays within 5% of the running mean of earlier epochs.
    let log = read(d.join("m1/training-log.csv"));
    for model in ["mqrnn", "lstm"] {
        let losses: Vec<f64> = log
            .lines()
            .skip(1)
            .filter(|l| l.starts_with(model))
            .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
            .collect();
        assert!(losses.len() >= 3);
        for k in 1..losses.len() {
            let mean = losses[..k].iter().sum::<f64>() / k as f64;
            assert!(losses[k] <= 1.05 * mean, "{model} epoch {k}: {} vs running mean {mean}", losses[k]);
        }
    }

    let run = |out: &str| {
        ok(scpo(
            d,
            &[
                "run", "--model-dir", "m1", "--lookahead", "3", "--eval-horizon", "6", "--policies", "pi,ev,scpo-ss:mqrnn",
                "--scenarios", "12", "--out-dir", out,
            ],
        ))
    };
    let printed = String::from_utf8(run("r1").stdout).unwrap();
    run("r2");
    assert_eq!(read(d.join("r1/report.json")), read(d.join("r2/report.json")));
    assert_eq!(read(d.join("r1/report.csv")), read(d.join("r2/report.csv")));
    assert!(read(d.join("r1/report.json")).contains("scpo-report-v1"));
    let csv = read(d.join("r1/report.csv"));
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3, "{csv}");
    let pi: Vec<&str> = rows[0].split(',').collect();
    assert_eq!(pi[1], "PI");
    assert_eq!(pi[7].parse::<f64>().unwrap(), 0.0);
    assert_eq!(pi[8].parse::<f64>().ok(), Some(1.0), "{csv}");
    assert!(printed.contains("100%"));
    assert!(read(d.join("r1/report.meta.json")).contains("\"times\""));

    let table = String::from_utf8(ok(scpo(d, &["report", "r1/report.json"])).stdout).unwrap();
    assert_eq!(table.lines().count(), 7);
    assert!(table.lines().nth(6).unwrap().contains("Time"));

    let out = scpo(d, &["run", "--model-dir", "m1", "--lookahead", "4", "--mqrnn", "m1/mqrnn-l3.json", "--policies", "pto:mqrnn"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[E_SHAPE]"));
}

#[test]
fn empty_trace_prints_header_only() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("e.json"), r#"{"format":"scpo-report-v1","rows":[],"episodes":[]}"#).unwrap();
    let out = ok(scpo(dir.path(), &["report", "e.json"]));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("Pattern"));

    std::fs::write(dir.path().join("w.json"), r#"{"format":"other","rows":[],"episodes":[]}"#).unwrap();
    let out = scpo(dir.path(), &["report", "w.json"]);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[E_FORMAT]"));
}
