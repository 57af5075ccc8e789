use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_mdacl");

fn mdacl(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("MDACL_OUT_DIR").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// The directory printed on the `run dir:` line.
fn run_dir_of(o: &Output) -> PathBuf {
    let out = stdout(o);
    let line = out.lines().find(|l| l.starts_with("run dir:")).expect("run dir line");
    PathBuf::from(line["run dir:".len()..].trim())
}

fn out_flag(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&mdacl(&["--help"])), 0);
    assert_eq!(code(&mdacl(&["--version"])), 0);
    assert_eq!(code(&mdacl(&["train", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&mdacl(&[])), 1);
    let o = mdacl(&["train", "--no-such-flag"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&mdacl(&["train", "--strategy", "sideways"])), 1);
    assert_eq!(code(&mdacl(&["train", "--steps", "many"])), 1);
    assert_eq!(code(&mdacl(&["train", "--manifest", "m.json", "--steps", "3"])), 1);
}

#[test]
fn runtime_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_flag(tmp.path());
    assert_eq!(code(&mdacl(&["train", "--lambda", "0.5", "--out-dir", &out])), 2);
    assert_eq!(code(&mdacl(&["train", "--config", "/no/such.toml", "--out-dir", &out])), 2);
    assert_eq!(code(&mdacl(&["report", tmp.path().to_str().unwrap()])), 2);
    assert_eq!(code(&mdacl(&["suite", "--ablation", "nonsense", "--out-dir", &out])), 2);
}

#[test]
fn train_zero_steps_writes_manifest_and_empty_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mdacl(&["train", "--steps", "0", "--out-dir", &out_flag(tmp.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dir = run_dir_of(&o);
    assert!(dir.join("manifest.json").is_file());
    assert_eq!(fs::read(dir.join("metrics.jsonl")).unwrap().len(), 0);
    let csv = fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert!(csv.starts_with("run_id,"));
}

#[test]
fn manifest_replay_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let first = mdacl(&[
        "train",
        "--steps",
        "25",
        "--enable-mdi",
        "--enable-hcg-low",
        "--enable-hcg-high",
        "--enable-miw",
        "--seed",
        "4",
        "--out-dir",
        &out_flag(&tmp.path().join("a")),
    ]);
    assert_eq!(code(&first), 0);
    let dir_a = run_dir_of(&first);
    let manifest = dir_a.join("manifest.json");
    let replay = mdacl(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out-dir",
        &out_flag(&tmp.path().join("b")),
    ]);
    assert_eq!(code(&replay), 0, "{}", String::from_utf8_lossy(&replay.stderr));
    let dir_b = run_dir_of(&replay);
    assert_ne!(dir_a, dir_b);
    for f in ["metrics.jsonl", "feature_grads.jsonl", "summary.csv", "manifest.json"] {
        assert_eq!(fs::read(dir_a.join(f)).unwrap(), fs::read(dir_b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read_to_string(dir_a.join("metrics.jsonl")).unwrap().lines().count(), 25);
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "[run]\nsteps = 3\nlr = 0.05\n[generator]\nheight = 8\nwidth = 8\n").unwrap();
    let o = mdacl(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--steps",
        "5",
        "--out-dir",
        &out_flag(tmp.path()),
    ]);
    assert_eq!(code(&o), 0);
    let dir = run_dir_of(&o);
    assert_eq!(fs::read_to_string(dir.join("metrics.jsonl")).unwrap().lines().count(), 5);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["run"]["lr"], 0.05);
    assert_eq!(m["generator"]["height"], 8);
}

#[test]
fn env_var_sets_default_out_root() {
    let tmp = tempfile::tempdir().unwrap();
    let env_root = tmp.path().join("env");
    let o = Command::new(BIN)
        .args(["train", "--steps", "2"])
        .env("MDACL_OUT_DIR", &env_root)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(run_dir_of(&o).starts_with(&env_root));

    let flag_root = tmp.path().join("flag");
    let o = Command::new(BIN)
        .args(["train", "--steps", "2", "--out-dir", flag_root.to_str().unwrap()])
        .env("MDACL_OUT_DIR", &env_root)
        .output()
        .unwrap();
    assert!(run_dir_of(&o).starts_with(&flag_root));
}

#[test]
fn weighting_suite_has_fifteen_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mdacl(&[
        "suite",
        "--weighting",
        "inverse,uniform,forward",
        "--seeds",
        "5",
        "--steps",
        "10",
        "--out-dir",
        &out_flag(tmp.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("15 cells"));
    let dir = run_dir_of(&o);
    let summary = fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 16);
    let aggs = fs::read_to_string(dir.join("aggregates.csv")).unwrap();
    let labels: Vec<&str> = aggs.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(labels, ["inverse", "uniform", "forward"]);
    assert_eq!(fs::read_dir(dir.join("cells")).unwrap().count(), 15);
    let svg = fs::read_to_string(dir.join("weighting_gradient_bias.svg")).unwrap();
    assert_eq!(svg.matches("class=\"legend-entry\"").count(), 3);
}

#[test]
fn ablation_flag_without_value_runs_every_row() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mdacl(&["suite", "--ablation", "--seeds", "1", "--steps", "3", "--out-dir", &out_flag(tmp.path())]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("6 cells"));
}

#[test]
fn report_rerenders_plots() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mdacl(&["train", "--steps", "8", "--out-dir", &out_flag(tmp.path())]);
    let dir = run_dir_of(&o);
    fs::remove_file(dir.join("gradient_bias.svg")).unwrap();
    let r = mdacl(&["report", dir.to_str().unwrap()]);
    assert_eq!(code(&r), 0);
    assert!(dir.join("gradient_bias.svg").is_file());
}

#[test]
fn gen_data_writes_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mdacl(&["gen-data", "--count", "3", "--seed", "7", "--out-dir", &out_flag(tmp.path())]);
    assert_eq!(code(&o), 0);
    let dir = run_dir_of(&o);
    assert_eq!(fs::read_to_string(dir.join("samples.jsonl")).unwrap().lines().count(), 3);
    assert!(dir.join("samples_preview.svg").is_file());
}

#[test]
fn grad_check_passes_on_fresh_checkout() {
    let o = mdacl(&["grad-check"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("PASS"));
    assert!(!out.contains("FAIL"));
}
