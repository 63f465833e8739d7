use std::path::Path;

use phiprof_core::analysis::{analyze_dir, AnalysisOptions};
use phiprof_core::model::Device;
use phiprof_core::orchestrator::plan::FailureInjection;
use phiprof_core::orchestrator::shell::ShellExecutor;
use phiprof_core::orchestrator::simulated::SimulatedExecutor;
use phiprof_core::orchestrator::{
    collect, read_manifest, Executor, run_experiment, ExperimentPlan, RunArtifacts, RunStatus, Step, EXPERIMENT_MANIFEST,
};
use phiprof_core::par::ExecMode;
use phiprof_core::sampler::StopSignal;

fn plan(divisor: f64) -> ExperimentPlan {
    let mut plan = ExperimentPlan::from_toml_str(
        r#"
name = "sim"
executor = "simulated"
[[static_configs]]
system_name = "bolt"
nodes = 1
mics_per_node = [1, 2]
problem_size = 50
[[config_space]]
host_frequency_hz = 2.6e9
mic_cores = 60
[timing]
pre_sleep_s = 10
post_sleep_s = 5
cooldown_s = 5
"#,
    )
    .unwrap();
    plan.time_divisor = divisor;
    plan.simulation.iterations = 40;
    plan
}

fn check_steps(run: &RunArtifacts, plan: &ExperimentPlan) {
    let numbers: Vec<u8> = run.steps.iter().map(|s| s.step).collect();
    let mut sorted = numbers.clone();
    sorted.sort_unstable();
    assert_eq!(numbers, sorted, "steps out of order: {numbers:?}");
    for w in run.steps.windows(2) {
        assert!(w[1].start_s >= w[0].end_s - 1e-9);
    }
    let gap = |s: Step, want: f64| {
        if let Some(r) = run.step(s) {
            if r.ok {
                assert!(r.end_s - r.start_s >= want, "{s}: {} < {want}", r.end_s - r.start_s);
            }
        }
    };
    gap(Step::PreSleep, plan.timing.pre_sleep_s);
    gap(Step::PostSleep, plan.timing.post_sleep_s);
    gap(Step::Cooldown, plan.timing.cooldown_s);
    assert_eq!(run.orphan_samplers, 0);
}

#[test]
fn simulated_experiment_runs_and_analyzes() {
    let dir = tempfile::tempdir().unwrap();
    let plan = plan(100.0);
    let mut exec = SimulatedExecutor::new(&plan);
    let (manifest, runs) = run_experiment(&plan, &mut exec, dir.path(), &StopSignal::new()).unwrap();
    assert!(manifest.all_ok(), "{manifest:?}");
    assert_eq!(runs.len(), 2);
    for run in &runs {
        check_steps(run, &plan);
        assert_eq!(run.steps.len(), 9);
        let m = read_manifest(&run.dir).unwrap();
        assert_eq!(m.status, RunStatus::Ok);
        assert!(m.files.iter().all(|f| f.bytes > 0));
        let opts = AnalysisOptions {
            config: run.config.clone(),
            ..AnalysisOptions::default()
        };
        let a = analyze_dir(&run.dir, &opts, ExecMode::Sequential).unwrap();
        let host = a.device(Device::Host { node: 0 }).unwrap();
        assert!(host.idle_time_s >= 10.0, "idle span {}", host.idle_time_s);
        let levels = &plan.simulation.host_power;
        assert!((host.idle_watts_avg - levels.idle_watts).abs() < 0.05 * levels.idle_watts, "{host:?}");
        assert!((host.active_watts_avg - levels.active_watts).abs() < 0.05 * levels.active_watts, "{host:?}");
    }
    assert!(dir.path().join(EXPERIMENT_MANIFEST).exists());
}

#[test]
fn injected_failure_is_recorded_and_cleans_up() {
    for step in [1u8, 2, 4, 8] {
        let dir = tempfile::tempdir().unwrap();
        let mut plan = plan(200.0);
        plan.failure = Some(FailureInjection {
            step,
            run_index: Some(0),
        });
        let mut exec = SimulatedExecutor::new(&plan);
        let (manifest, runs) = run_experiment(&plan, &mut exec, dir.path(), &StopSignal::new()).unwrap();
        assert!(manifest.complete);
        assert!(matches!(&runs[0].status, RunStatus::Failed { step: s, .. } if *s == step));
        assert!(runs[1].status.is_ok(), "{}", runs[1].status);
        for run in &runs {
            check_steps(run, &plan);
            assert!(run.step(Step::Cooldown).is_some());
        }
        assert_eq!(exec.live_samplers(), 0);
    }
}

#[test]
fn collect_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = plan(200.0);
    plan.static_configs[0].mics_per_node = phiprof_core::orchestrator::plan::OneOrMany::One(1);
    let mut exec = SimulatedExecutor::new(&plan);
    let (_, runs) = run_experiment(&plan, &mut exec, dir.path(), &StopSignal::new()).unwrap();
    let first = read_manifest(&runs[0].dir).unwrap();
    let again = collect(&runs[0], dir.path()).unwrap();
    assert_eq!(first, again);
}

#[test]
fn missing_file_fails_collection_of_ok_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = plan(200.0);
    plan.static_configs[0].mics_per_node = phiprof_core::orchestrator::plan::OneOrMany::One(1);
    let mut exec = SimulatedExecutor::new(&plan);
    let (_, runs) = run_experiment(&plan, &mut exec, dir.path(), &StopSignal::new()).unwrap();
    std::fs::remove_file(&runs[0].app_out).unwrap();
    assert!(collect(&runs[0], dir.path()).is_err());
}

fn write_script(path: &Path, body: &str) {
    std::fs::write(path, body).unwrap();
}

#[test]
fn shell_executor_runs_local_commands() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("work.sh");
    write_script(
        &work,
        "echo \"[0] TIMER total 1.0\"\necho \"[0] [Offload] [MIC 0] [Tag 0] [MIC Time] 0.5(seconds)\"\necho \"report=$OFFLOAD_REPORT\"\n",
    );
    let mut plan = plan(1.0);
    plan.static_configs[0].mics_per_node = phiprof_core::orchestrator::plan::OneOrMany::One(1);
    plan.timing.post_sleep_s = 0.0;
    plan.timing.cooldown_s = 0.0;
    plan.timing.pre_sleep_s = 0.2;
    plan.workload.command = format!("sh {}", work.display());
    plan.shell.host_sampler = "while true; do echo x >> {output}; sleep 0.05; done".into();
    plan.shell.mic_sampler = "while true; do echo y >> {output}; sleep 0.05; done".into();
    plan.shell.mic_output = dir.path().join("dev-{node}-{device}.log").display().to_string();
    plan.shell.collect = "cp {source} {dest}".into();
    plan.shell.stop_grace_s = 0.5;
    let out = dir.path().join("out");
    let mut exec = ShellExecutor::new(&plan);
    let (manifest, runs) = run_experiment(&plan, &mut exec, &out, &StopSignal::new()).unwrap();
    assert!(manifest.all_ok(), "{:?}", runs[0].status);
    let app = std::fs::read_to_string(&runs[0].app_out).unwrap();
    let rpt = std::fs::read_to_string(&runs[0].offload_report).unwrap();
    assert!(app.contains("report=2") && !app.contains("[Offload]"));
    assert!(rpt.contains("[Offload]"));
    assert_eq!(runs[0].orphan_samplers, 0);

    plan.workload.command = "exit 3".into();
    let mut exec = ShellExecutor::new(&plan);
    let (_, runs) = run_experiment(&plan, &mut exec, &dir.path().join("out2"), &StopSignal::new()).unwrap();
    assert!(matches!(runs[0].status, RunStatus::Failed { step: 4, .. }));
    assert_eq!(runs[0].orphan_samplers, 0);
}

#[test]
fn interrupt_stops_samplers_and_marks_incomplete() {
    let dir = tempfile::tempdir().unwrap();
    let plan = plan(50.0);
    let mut exec = SimulatedExecutor::new(&plan);
    let stop = StopSignal::new();
    let s = stop.clone();
    let t = std::thread::spawn(move || {
        std::thread::sleep(std::time::Duration::from_millis(150));
        s.stop();
    });
    let (manifest, runs) = run_experiment(&plan, &mut exec, dir.path(), &stop).unwrap();
    t.join().unwrap();
    assert!(!manifest.complete);
    assert_eq!(runs.len(), 1);
    assert!(matches!(&runs[0].status, RunStatus::Failed { cause, .. } if cause.contains("interrupted")));
    assert!(runs[0].step(Step::Cooldown).is_none());
    assert_eq!(runs[0].orphan_samplers, 0);
    let on_disk: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(EXPERIMENT_MANIFEST)).unwrap()).unwrap();
    assert_eq!(on_disk["complete"], false);
}
