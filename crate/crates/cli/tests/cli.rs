use serde_json::Value;
use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("powersat-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn powersat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_powersat"))
        .args(args)
        .env_remove("POWERSAT_OUT")
        .output()
        .unwrap()
}

fn report(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_lists_every_scenario() {
    let out = powersat(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for s in ["descfun", "bandwidth", "pbc-2link", "mpc-fin", "clfqp-2link", "servo-1dof", "verify"] {
        assert!(text.contains(s), "{s} missing from help");
    }
}

#[test]
fn verify_lists_a_negative_power_limit() {
    let dir = scratch("negative");
    let cfg = dir.join("bad.json");
    fs::write(&cfg, r#"{"p_max": -400.0}"#).unwrap();
    let out = powersat(&["verify", "servo-1dof", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let r = report(dir.join("servo-1dof/verify.json"));
    assert_eq!(r["passed"], false);
    assert_eq!(r["checks"][0]["name"], "config");
    assert!(r["checks"][0]["measured"]["error"].as_str().unwrap().contains("p_max"));
}

#[test]
fn parse_errors_carry_the_line() {
    let dir = scratch("parse");
    let cfg = dir.join("broken.json");
    fs::write(&cfg, "{\n  \"m\": 1.0,\n  \"d\": ,\n}\n").unwrap();
    let out = powersat(&["bandwidth", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = scratch("unknown");
    let cfg = dir.join("typo.json");
    fs::write(&cfg, r#"{"pmax": 400.0}"#).unwrap();
    let out = powersat(&["descfun", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mode_is_only_for_the_fin_example() {
    let dir = scratch("mode");
    let out = powersat(&["servo-1dof", "--mode", "receding", "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn env_var_sets_output_and_runs_repeat_exactly() {
    let dir = scratch("env");
    let run = |sub: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_powersat"))
            .args(["pbc-2link", "--parallel"])
            .env("POWERSAT_OUT", dir.join(sub))
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        fs::read(dir.join(sub).join("pbc-2link/trajectory.csv")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    assert!(!a.is_empty());
    assert_eq!(a, b);
    let r = report(dir.join("a/pbc-2link/report.json"));
    assert_eq!(r["passed"], true);
}

#[test]
fn fin_verify_reports_cost_ordering() {
    let dir = scratch("fin");
    let out = powersat(&["verify", "mpc-fin", "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let r = report(dir.join("mpc-fin/verify.json"));
    let ordering = &r["checks"].as_array().unwrap().iter().find(|c| c["name"] == "cost ordering").unwrap()["measured"];
    assert_eq!(ordering["c1_le_c2"], true);
    assert_eq!(ordering["c2_le_c3"], true);
}

#[test]
fn servo_run_writes_tables() {
    let dir = scratch("servo");
    let out = powersat(&["servo-1dof", "--out", dir.to_str().unwrap()]);
    // The chirp comparison is a claim, so only invariants decide the status.
    assert!(out.status.success());
    let steps = fs::read_to_string(dir.join("servo-1dof/steps.csv")).unwrap();
    assert_eq!(steps.lines().count(), 7);
    assert!(dir.join("servo-1dof/frf_C1.csv").exists());
}
