use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

const TINY: &str = r#"
seeds = [0]
conditions = ["full-kpi-mlp", "hscore-tesn-mlp"]

[data]
samples = 400

[train]
regime = "limited"
train_fraction = 0.25
batch_size = 32

[train.extractor]
d_model = 8
heads = 2
d_ff = 16
layers = 1
n_res = 16
n = 4
"#;

fn tesn(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tesn"));
    cmd.args(args).env_remove("TESN_OUTPUT_DIR");
    if let Some(dir) = env_out {
        cmd.env("TESN_OUTPUT_DIR", dir);
    }
    cmd.output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = tesn(args, None);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn staged_commands_chain_through_their_outputs() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let d = |name: &str| dir.path().join(name);

    ok(&["synth", "--config", s(&cfg), "--out", s(&d("synth")), "--duration-ms", "20000", "--seed", "3"]);
    let log = fs::read_to_string(d("synth/kpi_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 1000);

    ok(&["preprocess", "--config", s(&cfg), "--out", s(&d("pre")), "--input", s(&d("synth/kpi_log.csv"))]);
    let data = d("pre/dataset");
    assert!(data.join("metadata.json").exists());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d("pre/preprocess_report.json")).unwrap()).unwrap();
    assert_eq!(report["records"], 1000);
    assert!(report["samples"].as_u64().unwrap() > 100);

    ok(&["train-extractor", "--config", s(&cfg), "--out", s(&d("ext")), "--data", s(&data)]);
    let ext = d("ext/extractor");
    assert!(ext.join("normalization.json").exists());
    let history: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d("ext/history.json")).unwrap()).unwrap();
    assert_eq!(history["epochs"].as_array().unwrap().len(), 5);

    ok(&["embed", "--config", s(&cfg), "--out", s(&d("emb")), "--data", s(&data), "--extractor", s(&ext)]);
    let emb = fs::read_to_string(d("emb/embeddings.csv")).unwrap();
    assert_eq!(emb.lines().next(), Some("e0,e1,e2,e3"));
    assert_eq!(emb.lines().count() as u64, 1 + report["samples"].as_u64().unwrap());

    let stdout = ok(&["train-predictor", "--config", s(&cfg), "--out", s(&d("pred")), "--data", s(&data), "--extractor", s(&ext)]);
    assert!(stdout.contains("rsrq: mse"));
    assert!(d("pred/rsrq").is_dir() && d("pred/spectral_efficiency").is_dir());

    // Stage two refuses an extractor fit on another split.
    let shifted = d("shifted.toml");
    fs::write(&shifted, TINY.replace("train_fraction = 0.25", "train_fraction = 0.5")).unwrap();
    let out = tesn(&["train-predictor", "--config", s(&shifted), "--out", s(&d("p2")), "--data", s(&data), "--extractor", s(&ext)], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[contract]"));

    // Every command echoes its resolved configuration and input hashes.
    let echoed = fs::read_to_string(d("ext/config.toml")).unwrap();
    assert!(echoed.contains("regime = \"limited\"") && echoed.contains("extractor = 5"));
    let prov: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d("ext/provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["config"].as_str().unwrap().len(), 64);
    assert_eq!(prov["dataset"].as_str().unwrap().len(), 64);
}

#[test]
fn benchmark_writes_reports_that_the_report_command_reads() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("bench");
    let table = ok(&["benchmark", "--config", s(&cfg), "--out", s(&out), "--seeds", "1,2"]);
    assert!(table.contains("hscore-tesn-mlp") && table.contains("2/2"));
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    assert!(out.join("timings.json").exists());

    let report = out.join("report.json");
    assert_eq!(ok(&["report", "--input", s(&report), "--format", "csv"]), csv);
    assert_eq!(ok(&["report", "--input", s(&report), "--format", "json"]), fs::read_to_string(&report).unwrap());
    assert_eq!(ok(&["report", "--input", s(&report)]), table);
}

#[test]
fn sweep_writes_a_row_per_size_and_target_and_a_figure() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("sweep");
    ok(&["sweep-dim", "--config", s(&cfg), "--out", s(&out), "--dims", "2,4,8,16"]);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("n,target,mse_median"));
    assert_eq!(csv.lines().count(), 1 + 8);
    assert!(fs::read_to_string(out.join("sweep.svg")).unwrap().contains("<svg"));
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempdir().unwrap();
    let out = tesn(&["synth", "--duration-ms", "1000"], Some(dir.path()));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("synth/kpi_log.csv").exists());
    assert!(dir.path().join("synth/config.toml").exists());
}

#[test]
fn bad_configuration_exits_with_a_classified_error() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nbatchsize = 3\n").unwrap();
    let out = tesn(&["benchmark", "--config", s(&cfg), "--out", s(&dir.path().join("b"))], None);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[config]: config:"), "{err}");
    assert!(err.contains("batchsize"), "{err}");

    let missing = tesn(&["benchmark", "--config", s(&dir.path().join("nope.toml"))], None);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error[config]"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(tesn(&["frobnicate"], None).status.code(), Some(2));
    assert_eq!(tesn(&["report"], None).status.code(), Some(2));
    assert_eq!(tesn(&["report", "--input", "x", "--format", "yaml"], None).status.code(), Some(2));
}
