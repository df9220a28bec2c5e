mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::tiny_config;
use hib::baselines::VariantKind;

fn hib(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hib")).args(args).env("HIB_OUT_DIR", out).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn missing_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = hib(&["train", "--config", "missing.toml"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.toml"));
}

#[test]
fn bad_arguments_and_help() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&hib(&["frobnicate"], tmp.path())), 2);
    assert_eq!(code(&hib(&["train", "--variant", "sac_dr"], tmp.path())), 2);
    assert_eq!(code(&hib(&["eval", "--tiers", "extreme"], tmp.path())), 2);
    assert_eq!(code(&hib(&["--help"], tmp.path())), 0);

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[hib]\ntau = 2.0\n").unwrap();
    assert_eq!(code(&hib(&["train", "--config", bad.to_str().unwrap()], tmp.path())), 2);
    fs::write(&bad, "[hib]\nnot_a_key = 1\n").unwrap();
    assert_eq!(code(&hib(&["train", "--config", bad.to_str().unwrap()], tmp.path())), 2);
}

#[test]
fn runtime_failure_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    // No run exists yet, so there is no checkpoint to evaluate.
    let o = hib(&["eval", "--seed", "3"], tmp.path());
    assert_eq!(code(&o), 1);
    assert_eq!(code(&hib(&["compare", "--runs", tmp.path().join("none").to_str().unwrap()], tmp.path())), 1);
}

#[test]
fn verify_theorems_reports_json_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("reports/theorems.jsonl");
    let o = hib(&["verify-theorems", "--mdps", "100", "--seed", "7", "--out", report.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let recs: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    // Three ε values for the first bound, three η values for the second.
    assert_eq!(recs.len(), 600);
    assert!(recs.iter().all(|r| r["violated"] == false));
    assert_eq!(fs::read_to_string(report).unwrap(), text);
}

#[test]
fn train_eval_export_plot_and_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let cfg_path = tmp.path().join("tiny.toml");
    fs::write(&cfg_path, tiny_config(VariantKind::Hib, 60).to_toml()).unwrap();
    let c = cfg_path.to_str().unwrap();

    for v in ["hib", "dr"] {
        let o = hib(&["train", "--config", c, "--variant", v, "--quiet"], &out);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let rep: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
        assert_eq!(rep["variant"], v);
    }
    let runs: Vec<String> = {
        let mut r: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path().display().to_string()).collect();
        r.sort();
        r
    };
    assert_eq!(runs.len(), 2);

    let o = hib(&["eval", "--config", c, "--tiers", "ordinary,far_ood", "--episodes", "1"], &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rep: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(rep["tiers"].as_array().unwrap().len(), 2);

    let o = hib(&["export-latents", "--config", c, "--episodes", "3"], &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let hib_run = runs.iter().find(|r| Path::new(r).file_name().unwrap().to_str().unwrap().starts_with("hib-")).unwrap();
    let csv = fs::read_to_string(Path::new(hib_run).join("latents.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().ends_with("pca_x,pca_y"));

    let o = hib(&["plot", "--runs", &runs[0], &runs[1], "--kind", "bar", "--tiers", "ordinary,ood"], &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 2);
    for p in stdout(&o).lines() {
        assert!(fs::read_to_string(p).unwrap().starts_with("<svg"));
    }

    let o = hib(&["compare", "--runs", &runs[0], &runs[1], "--tiers", "ordinary", "ood", "far_ood", "--json"], &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let g: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    let cells = g["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 3);
    assert!(cells.iter().all(|row| row.as_array().unwrap().len() == 2));
    assert_eq!(g["variants"], serde_json::json!(["hib", "dr"]));

    let o = hib(&["compare", "--runs", out.to_str().unwrap()], &out);
    assert_eq!(stdout(&o).lines().count(), 5);
}
