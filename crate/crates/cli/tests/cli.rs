//! End-to-end checks of the binary: verbs, exit codes, and output files.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lanesim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lanesim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_plan(dir: &Path, body: &str) -> String {
    let path = dir.join("plan.json");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn run_executes_a_plan_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let plan = write_plan(
        dir.path(),
        r#"{"kernels": [{"name": "scal", "size": [128]}]}"#,
    );
    let out_dir = dir.path().join("out");
    let out = lanesim(&["run", &plan, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("geomean speedup"), "{text}");
    assert!(text.contains("scal"), "{text}");

    for name in ["scal_128_baseline.json", "scal_128_opt.json", "sweep.csv", "plot.csv"] {
        assert!(out_dir.join(name).exists(), "missing {name}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("scal_128_opt.json")).unwrap())
            .unwrap();
    assert_eq!(report["kernel"], "scal");
    assert_eq!(report["variant"], "opt");
    assert!(report["counters"]["cycles"].as_u64().unwrap() > 0);
}

#[test]
fn run_is_reproducible_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let plan = write_plan(
        dir.path(),
        r#"{"kernels": [{"name": "axpy", "size": [128]}]}"#,
    );
    let sweep = |out: &Path| {
        let run = lanesim(&["run", &plan, "--out", out.to_str().unwrap(), "--seed", "11"]);
        assert!(run.status.success(), "{}", stderr(&run));
        fs::read(out.join("sweep.csv")).unwrap()
    };
    let a = sweep(&dir.path().join("a"));
    let b = sweep(&dir.path().join("b"));
    assert_eq!(a, b);
}

#[test]
fn set_overrides_reach_the_machine_config() {
    let dir = tempfile::tempdir().unwrap();
    let plan = write_plan(
        dir.path(),
        r#"{"kernels": [{"name": "scal", "size": [64]}]}"#,
    );
    let out_dir = dir.path().join("out");
    let out = lanesim(&[
        "run",
        &plan,
        "--out",
        out_dir.to_str().unwrap(),
        "--set",
        "machine.seed=99",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("scal_64_opt.json")).unwrap())
            .unwrap();
    assert_eq!(report["seed"], 99);

    let bad = lanesim(&["run", &plan, "--set", "machine.no_such_field=1"]);
    assert_eq!(bad.status.code(), Some(1), "{}", stderr(&bad));
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();

    let missing = lanesim(&["run", "/no/such/plan.json"]);
    assert_eq!(missing.status.code(), Some(1));

    let garbage = write_plan(dir.path(), "not json at all {");
    let bad = lanesim(&["run", &garbage]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("JSON"), "{}", stderr(&bad));

    let empty = write_plan(dir.path(), r#"{"kernels": []}"#);
    let rejected = lanesim(&["run", &empty]);
    assert_eq!(rejected.status.code(), Some(1));

    let invalid_machine = write_plan(
        dir.path(),
        r#"{"kernels": [{"name": "scal", "size": [64]}], "machine": {"dlen": 300}}"#,
    );
    let out = lanesim(&["run", &invalid_machine]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("dlen"), "{}", stderr(&out));
}

#[test]
fn roofline_is_analytical_and_exact() {
    let out = lanesim(&["roofline", "gemm", "128x128x128"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let point: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(point["p_ideal"], 16.0);
    assert_eq!(point["oi"], 16.0);
    assert!(point["p_achieved"].is_null());

    let scal = lanesim(&["roofline", "scal", "1024"]);
    let point: serde_json::Value = serde_json::from_str(&stdout(&scal)).unwrap();
    assert_eq!(point["p_ideal"], 2.0);

    assert_eq!(lanesim(&["roofline", "scal", "0"]).status.code(), Some(1));
    assert_eq!(lanesim(&["roofline", "nope", "64"]).status.code(), Some(1));
    assert_eq!(lanesim(&["roofline", "gemv", "64"]).status.code(), Some(1));
}

#[test]
fn chain_calculates_the_analytical_decomposition() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chain.json");
    fs::write(
        &path,
        r#"{
            "stages": [
                {"kind": "load", "startup": 0},
                {"kind": "multiply", "startup": 4}
            ],
            "inter_stage_delays": [4],
            "fill_time": 10,
            "tail_time": 0,
            "vl": 128,
            "lanes": 8
        }"#,
    )
    .unwrap();
    let out = lanesim(&["chain", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let timing: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(timing["prologue"], 14);
    assert_eq!(timing["steady"], 16);
    assert_eq!(timing["total"], 30);

    fs::write(&path, r#"{"stages": [], "inter_stage_delays": [], "fill_time": 0, "tail_time": 0, "vl": 1, "lanes": 1}"#).unwrap();
    assert_eq!(
        lanesim(&["chain", path.to_str().unwrap()]).status.code(),
        Some(1)
    );
}

#[test]
fn litmus_scenarios_all_pass() {
    let out = lanesim(&["litmus", "all"]);
    assert!(out.status.success(), "{}\n{}", stdout(&out), stderr(&out));
    let text = stdout(&out);
    for name in [
        "war-early-release",
        "local-issue",
        "forwarding",
        "prefetch",
    ] {
        assert!(text.contains(&format!("{name}: PASS")), "{text}");
    }
    assert_eq!(lanesim(&["litmus", "bogus"]).status.code(), Some(1));
}

#[test]
fn builtin_sensitivity_plan_runs() {
    let out = lanesim(&["run", "sensitivity"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.matches("scal").count(), 3, "{text}");
    assert_eq!(text.matches("gemm").count(), 3, "{text}");
    assert!(text.contains("geomean speedup"), "{text}");
}
