use std::fs;
use std::process::{Command, Output};

use serde_json::Value;

fn oracle_sim(args: &[&str], out: &std::path::Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oracle-sim")).args(args).env("ORACLE_SIM_OUT", out).output().expect("binary runs")
}

fn report(out: &std::path::Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

#[test]
fn quadratic_run_writes_a_passing_report() {
    let dir = tempfile::tempdir().unwrap();
    let o =
        oracle_sim(&["simulate", "--mode", "quadratic", "--h", "1", "--l", "1", "--d", "2", "--no-pack"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = &report(dir.path())["reports"][0];
    assert_eq!(r["calls"], 32);
    assert_eq!(r["expected_calls"], 32);
    assert!(r["relative_error"]["max"].as_f64().unwrap() <= 1e-8);
    let csv = fs::read_to_string(dir.path().join("errors.csv")).unwrap();
    assert!(csv.starts_with("mode,trial,instance,row,relative_error,absolute_error\n"));
    assert_eq!(csv.lines().count(), 17);
}

#[test]
fn reverse_run_reports_its_audit() {
    let dir = tempfile::tempdir().unwrap();
    let o = oracle_sim(&["simulate", "--mode", "reverse"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let rev = &report(dir.path())["reports"][0]["reverse"];
    assert_eq!(rev["large_calls"], 1);
    assert_eq!(rev["small_matmuls"], 12);
}

#[test]
fn config_file_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"mode": "window", "seed": 7}"#).unwrap();
    let o = oracle_sim(&["simulate", "--mode", "sink", "--seed", "1", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = &report(dir.path())["reports"][0];
    assert_eq!(r["mode"], "window");
    assert_eq!(r["config"]["seed"], 7);
}

#[test]
fn structural_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = oracle_sim(&["simulate", "--n", "15"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("divisible by chunk"));
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"bogus": true}"#).unwrap();
    let o = oracle_sim(&["simulate", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn failing_criteria_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    // Sampling a quarter of the keys cannot reach this accuracy.
    let o = oracle_sim(&["simulate", "--mode", "average", "--trials", "2", "--epsilon-target", "1e-9"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL average/trial-pass-rate"));
}

#[test]
fn reports_are_reproducible_apart_from_wall_time() {
    let strip = |mut v: Value| {
        for r in v["reports"].as_array_mut().unwrap() {
            r["wall_time_s"] = Value::Null;
        }
        v
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = oracle_sim(
            &["simulate", "--mode", "quadratic-causal", "--seed", "3", "--output-path", d.path().to_str().unwrap()],
            d.path(),
        );
        assert_eq!(o.status.code(), Some(0));
    }
    let (ra, rb) = (strip(report(a.path())), strip(report(b.path())));
    assert_eq!(ra["reports"][0]["calls"], rb["reports"][0]["calls"]);
    assert_eq!(ra["reports"][0]["relative_error"], rb["reports"][0]["relative_error"]);
    let mut ra = ra;
    let mut rb = rb;
    ra["reports"][0]["config"]["output-path"] = Value::Null;
    rb["reports"][0]["config"]["output-path"] = Value::Null;
    assert_eq!(ra, rb);
}

#[test]
fn gen_writes_deterministic_instances() {
    let dir = tempfile::tempdir().unwrap();
    let o = oracle_sim(&["gen", "--mode", "average", "--seed", "2"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let first = fs::read_to_string(dir.path().join("instance-average.json")).unwrap();
    let v: Value = serde_json::from_str(&first).unwrap();
    assert_eq!(v["instance"]["boundedness"]["passed"], true);
    oracle_sim(&["gen", "--mode", "average", "--seed", "2"], dir.path());
    assert_eq!(first, fs::read_to_string(dir.path().join("instance-average.json")).unwrap());
}

#[test]
fn verify_json_lists_every_criterion() {
    let dir = tempfile::tempdir().unwrap();
    let o = oracle_sim(&["verify", "--json"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["criteria"].as_array().unwrap().len(), 9);
    assert_eq!(v["passed"], true);
}

#[test]
fn verify_names_the_criterion_a_corrupted_build_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = oracle_sim(&["verify", "--inject-swapped-weights"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL quadratic-exactness"));
}
