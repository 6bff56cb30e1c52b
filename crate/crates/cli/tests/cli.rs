use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_parity-lab"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn manifest_line(path: &Path) -> serde_json::Value {
    let text = fs::read_to_string(path).unwrap();
    let first = text.lines().next().unwrap();
    serde_json::from_str(first.strip_prefix("# manifest: ").expect("manifest preamble")).unwrap()
}

#[test]
fn sweep_writes_schema_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("grid.toml");
    fs::write(&cfg, "n = [12]\nk = [2]\nm = [200, \"online\"]\nr = [8, 16]\ntrials = 2\n[train]\nsteps = 300\ntest_size = 500\n").unwrap();
    ok(dir.path(), &["--seed", "3", "sweep", "--config", cfg.to_str().unwrap(), "--workers", "1"]);
    let csv = dir.path().join("sweep.csv");
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().nth(1).unwrap(), "n,k,m,r,scheme,s,trial,seed,success,steps_to_success,final_test_err,diverged");
    assert_eq!(text.lines().count(), 2 + 8);
    assert_eq!(manifest_line(&csv)["subcommand"], "sweep");
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("sweep_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["result"]["cells"].as_array().unwrap().len(), 4);
    let cells: std::collections::BTreeSet<String> = text.lines().skip(2).map(|l| l.split(',').take(6).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(cells.len(), 4);
}

#[test]
fn sweep_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("grid.json");
    fs::write(&cfg, r#"{"n":[10],"k":[2],"m":[100],"r":[6],"trials":3,"train":{"steps":200,"test_size":300}}"#).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&a, &["--format", "json", "sweep", "--config", cfg.to_str().unwrap()]);
    ok(&b, &["--format", "json", "sweep", "--config", cfg.to_str().unwrap()]);
    let strip = |p: &Path| {
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
        v["manifest"]["outputs"] = serde_json::Value::Null;
        v
    };
    assert_eq!(strip(&a.join("sweep.json")), strip(&b.join("sweep.json")));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("grid.json");
    fs::write(&cfg, r#"{"n":[10],"k":[2],"m":[100],"r":[6],"widht":4}"#).unwrap();
    let out = run(dir.path(), &["sweep", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("widht"));
}

#[test]
fn sqcheck_emits_audit_table_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["sqcheck", "--n", "6", "--k", "2", "--tau", "0.9"]);
    let text = fs::read_to_string(dir.path().join("sq_audit.csv")).unwrap();
    assert_eq!(text.lines().nth(1).unwrap(), "S,max_corr,hidden");
    assert_eq!(text.lines().count(), 2 + 15);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("sq_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["result"]["parseval_ok"], true);
}

#[test]
fn theory_reports_are_json() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["theory-oversparse", "--n", "6", "--k", "2", "--s", "3", "--r", "60", "--phase2-steps", "50"]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("theory_oversparse.json")).unwrap()).unwrap();
    assert_eq!(v["result"]["good_weights_exact"], true);
    assert_eq!(v["result"]["ideal_cube_error"], 0.0);
    ok(dir.path(), &["theory-undersparse", "--n", "8", "--k", "4", "--s", "2"]);
    assert!(dir.path().join("theory_undersparse.json").exists());
    let out = run(dir.path(), &["--format", "csv", "theory-undersparse"]);
    assert!(!out.status.success());
}

#[test]
fn fourier_and_popgrad_tables() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["fourier", "--function", "maj", "--n", "3", "--order", "1"]);
    assert!(stdout.contains("d=1 1/2"));
    ok(dir.path(), &["--format", "csv", "popgrad", "--n", "6", "--k", "2", "--s", "3"]);
    let text = fs::read_to_string(dir.path().join("popgrad.csv")).unwrap();
    let row0: Vec<&str> = text.lines().nth(2).unwrap().split(',').collect();
    let (a, b): (f64, f64) = (row0[1].parse().unwrap(), row0[2].parse().unwrap());
    assert!((a - b).abs() < 1e-12);
    assert!(!run(dir.path(), &["fourier", "--n", "4"]).status.success());
}

#[test]
fn train_respects_flags() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["train", "--n", "10", "--k", "1", "--r", "8", "--steps", "50", "--eta", "0.05"]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("train.json")).unwrap()).unwrap();
    assert_eq!(v["manifest"]["config"]["train"]["rule"]["eta"]["w"], 0.05);
    assert_eq!(v["manifest"]["config"]["train"]["steps"], 50);
    let bad = run(dir.path(), &["train", "--n", "10", "--k", "1", "--r", "8", "--eta=-1"]);
    assert!(!bad.status.success());
}

#[test]
fn lottery_runs_small() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("lottery.json");
    fs::write(&cfg, r#"{"n":12,"k":2,"r":20,"keep":4,"retrain_seeds":3,"max_full_attempts":1,"train":{"steps":400,"test_size":500}}"#).unwrap();
    ok(dir.path(), &["--format", "csv", "lottery", "--config", cfg.to_str().unwrap()]);
    let text = fs::read_to_string(dir.path().join("lottery.csv")).unwrap();
    assert_eq!(text.lines().count(), 2 + 6);
}
