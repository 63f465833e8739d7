use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn phiprof(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phiprof"))
        .args(args)
        .env_remove("PHIPROF_EXECUTOR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_scenario(dir: &Path, seed: u64) -> String {
    let p = dir.join(format!("s{seed}.toml"));
    fs::write(&p, format!("seed = {seed}\niterations = 40\npre_run_s = 12.0\npost_run_s = 5.0\n")).unwrap();
    p.display().to_string()
}

#[test]
fn synth_writes_four_artifacts_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = phiprof(&["synth", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["app.out", "host-0.log", "mic-0-0.log", "offload.rpt", "truth.json"]);
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_scenario(dir.path(), 5);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = phiprof(&["synth", &s, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for name in ["app.out", "host-0.log", "mic-0-0.log", "offload.rpt", "truth.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn synth_bad_inputs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(code(&phiprof(&["synth", "/nonexistent/scenario.toml", "--out", out.to_str().unwrap()])), 2);
    let infeasible = dir.path().join("bad.toml");
    fs::write(&infeasible, "[phases]\nforce_s = 0.1\n[offload]\nmic_time_s = 1.0\n").unwrap();
    assert_eq!(code(&phiprof(&["synth", infeasible.to_str().unwrap(), "--out", out.to_str().unwrap()])), 2);
    assert_eq!(code(&phiprof(&["frobnicate"])), 2);
}

#[test]
fn analyze_recovers_synthetic_truth() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_scenario(dir.path(), 9);
    let run = dir.path().join("run");
    assert_eq!(code(&phiprof(&["synth", &s, "--out", run.to_str().unwrap()])), 0);
    let o = phiprof(&["analyze", run.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    let truth: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("truth.json")).unwrap()).unwrap();
    let got = report["report"]["phases"]["loop_total_s"].as_f64().unwrap();
    let want = truth["phases"]["loop_total_s"].as_f64().unwrap();
    assert!((got - want).abs() < 0.12, "{got} vs {want}");
    let got = report["report"]["total_energy_j"].as_f64().unwrap();
    let want = truth["total_energy_j"].as_f64().unwrap();
    assert!((got - want).abs() <= 0.015 * want, "{got} vs {want}");
    assert!(report["warnings"].is_array());

    let mut csv = csv::Reader::from_path(run.join("summary.csv")).unwrap();
    assert_eq!(csv.headers().unwrap().len(), phiprof_core::analysis::CSV_COLUMNS.len());
    assert_eq!(csv.records().count(), 1);
}

#[test]
fn analyze_without_offload_report_fails() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_scenario(dir.path(), 3);
    let run = dir.path().join("run");
    assert_eq!(code(&phiprof(&["synth", &s, "--out", run.to_str().unwrap()])), 0);
    fs::remove_file(run.join("offload.rpt")).unwrap();
    let o = phiprof(&["analyze", run.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("offload.rpt"), "{}", stderr(&o));
}

#[test]
fn validate_names_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_scenario(dir.path(), 4);
    let run = dir.path().join("run");
    assert_eq!(code(&phiprof(&["synth", &s, "--out", run.to_str().unwrap()])), 0);
    let o = phiprof(&["validate", run.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = run.join("mic-0-0.log");
    let mut text = fs::read_to_string(&log).unwrap();
    text.insert_str(0, "garbage line\n");
    fs::write(&log, text).unwrap();
    let o = phiprof(&["validate", run.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("mic-0-0.log") && err.contains("line 1"), "{err}");
    assert_eq!(code(&phiprof(&["analyze", run.to_str().unwrap()])), 1);
}

const BOLT: &str = r#"
name = "bolt"
[[static_configs]]
system_name = "bolt"
nodes = [1, 2, 3]
mics_per_node = [1, 2]
problem_size = 50

[[config_space]]
host_frequency_hz = 2.6e9
mic_cores = [60, 30]

[simulation]
iterations = 20
"#;

#[test]
fn run_then_analyze_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("bolt.plan");
    fs::write(&plan, BOLT).unwrap();
    let out = dir.path().join("results");
    let o = phiprof(&[
        "run",
        "--plan",
        plan.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--executor",
        "simulated",
        "--time-divisor",
        "1000",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let runs: Vec<_> = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).collect();
    assert_eq!(runs.len(), 12);
    let exp: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("experiment.json")).unwrap()).unwrap();
    assert_eq!(exp["complete"], true);

    let report = dir.path().join("report");
    let o = phiprof(&["analyze", out.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut csv = csv::Reader::from_path(report.join("summary.csv")).unwrap();
    assert_eq!(csv.records().count(), 12);
}

#[test]
fn empty_or_broken_plan_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("empty.plan");
    fs::write(&plan, "name = \"empty\"\n").unwrap();
    let out = dir.path().join("out");
    let args = ["run", "--plan", plan.to_str().unwrap(), "--out", out.to_str().unwrap()];
    assert_eq!(code(&phiprof(&args)), 2);
    fs::write(&plan, "static_configs = 3").unwrap();
    assert_eq!(code(&phiprof(&args)), 2);
}

#[test]
fn sample_rejects_fast_mic_period() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.log");
    let o = phiprof(&[
        "sample",
        "--kind",
        "mic_replay",
        "--source",
        "/dev/null",
        "--output",
        out.to_str().unwrap(),
        "--period-ms",
        "10",
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}
