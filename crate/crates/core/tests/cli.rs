use std::path::Path;
use std::process::{Command, Output};

use msmix::dataio::read_bundle;
use msmix::inference::PredictionRecord;
use msmix::metrics::EvalReport;

fn msmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msmix")).args(args).env_remove("MSMIX_DATA_DIR").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture(name: &str) -> String {
    format!("{}/tests/fixtures/{}", env!("CARGO_MANIFEST_DIR"), name)
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--length", "1200", "--seed", "2", "-o", path(dir)];
    args.extend_from_slice(extra);
    let out = msmix(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_evaluate_predict_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    synth(&data, &[]);
    assert!(data.join("ground_truth.csv").exists() && data.join("effective_config.json").exists());

    let out = msmix(&["train", "--data", path(&data), "--epochs", "3", "--impartial-epochs", "1", "--hidden", "4", "--lookback", "4", "-o", path(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let diag = std::fs::read_to_string(run.join("diagnostics.csv")).unwrap();
    assert_eq!(diag.lines().count(), 4);
    assert!(diag.lines().nth(1).unwrap().starts_with("0,impartial,"));

    let ck = run.join("checkpoint.json");
    let out = msmix(&["evaluate", "--checkpoint", path(&ck), "--data", path(&data)]);
    assert_eq!(code(&out), 0);
    let report: EvalReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report.n, 240);
    assert_eq!(report.unc_bins.len(), 5);
    assert!(report.rmse >= report.mae);

    let out = msmix(&["evaluate", "--checkpoint", path(&ck), "--data", path(&data), "--split", "val", "--format", "csv"]);
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("metric,value\nn,120\n"));

    let preds = tmp.path().join("preds.jsonl");
    assert_eq!(code(&msmix(&["predict", "--checkpoint", path(&ck), "--data", path(&data), "-o", path(&preds)])), 0);
    let records: Vec<PredictionRecord> = std::fs::read_to_string(&preds).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 240);
    for r in &records {
        assert!(r.q10 <= r.q30 && r.q30 <= r.q50 && r.q50 <= r.q70 && r.q70 <= r.q90);
        assert!((r.aleatoric + r.mixture - r.total).abs() < 1e-12);
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    let cfg = tmp.path().join("train.json");
    std::fs::write(&cfg, r#"{"model": {"hidden": 5, "seed": 9}, "schedule": {"total_epochs": 2, "impartial_epochs": 1}, "window": {"lookback": 3}}"#).unwrap();
    let run = tmp.path().join("run");
    let out = msmix(&["train", "--data", path(&data), "--config", path(&cfg), "--hidden", "3", "-o", path(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let eff: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("effective_config.json")).unwrap()).unwrap();
    assert_eq!(eff["model"]["hidden"], 3);
    assert_eq!(eff["model"]["seed"], 9);
    assert_eq!(eff["window"]["lookback"], 3);
    assert_eq!(eff["schedule"]["total_epochs"], 2);
    assert_eq!(eff["schedule"]["batch_size"], 64);
}

#[test]
fn data_dir_defaults_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_msmix")).args(["synth", "--length", "1000"]).env("MSMIX_DATA_DIR", tmp.path()).output().unwrap();
    assert_eq!(code(&out), 0);
    assert!(tmp.path().join("meta.json").exists());
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&msmix(&["synth", "--sources", "1", "-o", path(&tmp.path().join("x"))])), 1);
    assert_eq!(code(&msmix(&["train", "--bogus"])), 1);
    assert_eq!(code(&msmix(&["train", "--data", path(&tmp.path().join("missing")), "-o", path(tmp.path())])), 2);

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"schedule": {"epochs": 3}}"#).unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    assert_eq!(code(&msmix(&["train", "--data", path(&data), "--config", path(&bad), "-o", path(tmp.path())])), 1);

    // normal synthetic targets take negative values
    let out = msmix(&["train", "--data", path(&data), "--dist", "lognormal", "--epochs", "1", "--impartial-epochs", "0", "-o", path(tmp.path())]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("positive"));
}

#[test]
fn lognormal_synthetic_trains() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &["--dist", "lognormal"]);
    let out = msmix(&["train", "--data", path(&data), "--dist", "lognormal", "--epochs", "2", "--impartial-epochs", "1", "--hidden", "4", "-o", path(&tmp.path().join("run"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn featurize_two_markets() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("bundle");
    let cfg = tmp.path().join("feat.json");
    std::fs::write(&cfg, r#"{"lob": {"tick": 0.25}, "splits": {"train": 0.34, "val": 0.33, "test": 0.33}}"#).unwrap();
    let out = msmix(&[
        "featurize",
        "--trades",
        &fixture("mkt_a_trades.csv"),
        "--lob",
        &fixture("mkt_a_lob.csv"),
        "--trades",
        &fixture("mkt_b_trades.csv"),
        "--lob",
        &fixture("mkt_b_lob.csv"),
        "--market",
        "a",
        "--market",
        "b",
        "--interval",
        "60",
        "--config",
        path(&cfg),
        "-o",
        path(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let (ds, _) = read_bundle(&out_dir).unwrap();
    assert_eq!(ds.input_dims(), vec![6, 13, 6, 13]);
    assert_eq!(ds.timestamps, vec![60, 120, 180]);
    assert_eq!(ds.target, vec![0.0, 3.0, 2.0]);
    let ids: Vec<&str> = ds.sources.iter().map(|s| s.source_id.as_str()).collect();
    assert_eq!(ids, ["a_trades", "a_lob", "b_trades", "b_lob"]);

    let out = msmix(&["featurize", "--trades", &fixture("mkt_a_trades.csv"), "-o", path(&out_dir)]);
    assert_eq!(code(&out), 1);
}

#[test]
fn verify_passes() {
    let out = msmix(&["verify", "--draws", "10"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(!text.contains("FAIL"));
}
