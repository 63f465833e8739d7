//! Measured execution of experiment plans.
//!
//! Each run follows nine steps: start host samplers, start MIC samplers,
//! idle for the baseline, run the workload, idle again, stop MIC samplers,
//! stop host samplers, collect device-side files, cool down. Runs execute
//! strictly one after another.

pub mod plan;
pub mod shell;
pub mod simulated;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use plan::{enumerate_runs, run_id, ExecutorKind, ExperimentPlan, PlanError};

use crate::model::RunConfig;
use crate::sampler::{Clock, StopSignal};
use crate::trace::{host_log_name, mic_log_name, APP_OUT, OFFLOAD_REPORT};
use crate::warning::{Warning, WarningKind};

pub const STEPS_LOG: &str = "steps.log";
pub const MANIFEST: &str = "manifest.json";
pub const EXPERIMENT_MANIFEST: &str = "experiment.json";
/// Relative host frequency difference tolerated before a warning.
pub const FREQUENCY_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Step {
    StartHostSamplers = 1,
    StartMicSamplers = 2,
    PreSleep = 3,
    Workload = 4,
    PostSleep = 5,
    StopMicSamplers = 6,
    StopHostSamplers = 7,
    CollectMicFiles = 8,
    Cooldown = 9,
}

impl Step {
    pub const ALL: [Step; 9] = [
        Step::StartHostSamplers,
        Step::StartMicSamplers,
        Step::PreSleep,
        Step::Workload,
        Step::PostSleep,
        Step::StopMicSamplers,
        Step::StopHostSamplers,
        Step::CollectMicFiles,
        Step::Cooldown,
    ];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Step::StartHostSamplers => "start_host_samplers",
            Step::StartMicSamplers => "start_mic_samplers",
            Step::PreSleep => "pre_sleep",
            Step::Workload => "workload",
            Step::PostSleep => "post_sleep",
            Step::StopMicSamplers => "stop_mic_samplers",
            Step::StopHostSamplers => "stop_host_samplers",
            Step::CollectMicFiles => "collect_mic_files",
            Step::Cooldown => "cooldown",
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.number(), self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed { step: u8, cause: String },
}

impl RunStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, RunStatus::Ok)
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunStatus::Ok => write!(f, "ok"),
            RunStatus::Failed { step, cause } => write!(f, "failed(step {step}: {cause})"),
        }
    }
}

/// Executor-clock times of one step, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u8,
    pub name: String,
    pub start_s: f64,
    pub end_s: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub run_id: String,
    pub config: RunConfig,
    pub dir: PathBuf,
    pub host_logs: Vec<PathBuf>,
    pub mic_logs: Vec<PathBuf>,
    pub app_out: PathBuf,
    pub offload_report: PathBuf,
    pub status: RunStatus,
    pub steps: Vec<StepRecord>,
    pub warnings: Vec<Warning>,
    /// Sampler tasks still alive when the run returned.
    pub orphan_samplers: usize,
}

impl RunArtifacts {
    pub fn declared_files(&self) -> Vec<&PathBuf> {
        self.host_logs
            .iter()
            .chain(&self.mic_logs)
            .chain([&self.app_out, &self.offload_report])
            .collect()
    }

    pub fn step(&self, step: Step) -> Option<&StepRecord> {
        self.steps.iter().find(|s| s.step == step.number())
    }
}

/// Handle to a running sampler.
pub trait SamplerTask: Send {
    /// Signals the sampler and waits for it; returns lines written.
    fn stop(self: Box<Self>) -> Result<u64, String>;
}

/// Where and how the steps of a run are carried out.
pub trait Executor {
    fn clock(&self) -> &dyn Clock;

    /// Called once per run before step 1.
    fn prepare(&mut self, _index: usize, _config: &RunConfig, _run_dir: &Path) -> Result<(), String> {
        Ok(())
    }

    fn start_host_sampler(&mut self, node: u32, output: &Path) -> Result<Box<dyn SamplerTask>, String>;

    /// Starts a sampler that writes on the device side; its file is fetched
    /// in step 8.
    fn start_mic_sampler(&mut self, node: u32, device: u32) -> Result<Box<dyn SamplerTask>, String>;

    /// Runs the workload to completion, writing the application output and
    /// offload report into the run directory.
    fn run_workload(&mut self, config: &RunConfig, run_dir: &Path, interrupt: &StopSignal) -> Result<(), String>;

    fn collect_mic(&mut self, node: u32, device: u32, dest: &Path) -> Result<(), String>;

    /// Frequency the node reports, when the executor can tell.
    fn reported_host_frequency_hz(&self, _node: u32) -> Option<f64> {
        None
    }

    /// Sampler tasks currently alive.
    fn live_samplers(&self) -> usize;
}

struct StepLog {
    file: Option<fs::File>,
    records: Vec<StepRecord>,
}

impl StepLog {
    fn record(&mut self, step: Step, start_s: f64, end_s: f64, ok: bool) {
        if let Some(f) = self.file.as_mut() {
            let _ = writeln!(
                f,
                "step={} name={} start={start_s:.6} end={end_s:.6} status={}",
                step.number(),
                step.name(),
                if ok { "ok" } else { "failed" }
            );
        }
        self.records.push(StepRecord {
            step: step.number(),
            name: step.name().into(),
            start_s,
            end_s,
            ok,
        });
    }
}

/// Sleeps `secs` of executor time; returns false when interrupted.
fn sleep_for(clock: &dyn Clock, secs: f64, interrupt: &StopSignal) -> bool {
    let until = clock.now() + secs;
    loop {
        if interrupt.is_stopped() {
            return false;
        }
        let left = until - clock.now();
        if left <= 0.0 {
            return true;
        }
        clock.sleep(left.min(0.5));
    }
}

/// Executes the nine steps for one configuration. Failures are recorded in
/// the returned status; samplers are always stopped and the cool-down is
/// honored unless the run was interrupted.
pub fn execute_run(
    index: usize,
    config: &RunConfig,
    plan: &ExperimentPlan,
    exec: &mut dyn Executor,
    out_dir: &Path,
    interrupt: &StopSignal,
) -> RunArtifacts {
    let id = run_id(index, config);
    let dir = out_dir.join(&id);
    let mut art = RunArtifacts {
        run_id: id,
        config: config.clone(),
        dir: dir.clone(),
        host_logs: (0..config.nodes).map(|n| dir.join(host_log_name(n))).collect(),
        mic_logs: (0..config.nodes)
            .flat_map(|n| (0..config.mics_per_node).map(move |d| (n, d)))
            .map(|(n, d)| dir.join(mic_log_name(n, d)))
            .collect(),
        app_out: dir.join(APP_OUT),
        offload_report: dir.join(OFFLOAD_REPORT),
        status: RunStatus::Ok,
        steps: Vec::new(),
        warnings: Vec::new(),
        orphan_samplers: 0,
    };
    if let Err(e) = fs::create_dir_all(&dir) {
        art.status = RunStatus::Failed {
            step: 0,
            cause: format!("{}: {e}", dir.display()),
        };
        return art;
    }
    let mut log = StepLog {
        file: fs::File::create(dir.join(STEPS_LOG)).ok(),
        records: Vec::new(),
    };
    let injected = plan
        .failure
        .as_ref()
        .filter(|f| f.run_index.map_or(true, |i| i == index))
        .map(|f| f.step);
    for node in 0..config.nodes {
        if let Some(f) = exec.reported_host_frequency_hz(node) {
            if (f - config.host_frequency_hz).abs() > FREQUENCY_TOLERANCE * config.host_frequency_hz {
                art.warnings.push(Warning::new(
                    WarningKind::FrequencyMismatch,
                    format!("node {node} reports {f:.0} Hz, plan requests {:.0} Hz", config.host_frequency_hz),
                ));
            }
        }
    }

    let mut host_tasks: Vec<Box<dyn SamplerTask>> = Vec::new();
    let mut mic_tasks: Vec<Box<dyn SamplerTask>> = Vec::new();
    let mut failure: Option<(Step, String)> = None;
    let mut interrupted = false;

    if let Err(e) = exec.prepare(index, config, &dir) {
        failure = Some((Step::StartHostSamplers, format!("prepare: {e}")));
    }

    for step in Step::ALL {
        if failure.is_some() || interrupted {
            break;
        }
        if step == Step::Cooldown {
            break;
        }
        if interrupt.is_stopped() {
            interrupted = true;
            failure = Some((step, "interrupted".into()));
            break;
        }
        let clock = exec.clock();
        let start = clock.now();
        let result: Result<(), String> = if injected == Some(step.number()) {
            Err("injected failure".into())
        } else {
            match step {
                Step::StartHostSamplers => (0..config.nodes).try_for_each(|n| {
                    host_tasks.push(exec.start_host_sampler(n, &art.host_logs[n as usize])?);
                    Ok(())
                }),
                Step::StartMicSamplers => (0..config.nodes)
                    .flat_map(|n| (0..config.mics_per_node).map(move |d| (n, d)))
                    .try_for_each(|(n, d)| {
                        mic_tasks.push(exec.start_mic_sampler(n, d)?);
                        Ok(())
                    }),
                Step::PreSleep | Step::PostSleep => {
                    let secs = if step == Step::PreSleep {
                        plan.timing.pre_sleep_s
                    } else {
                        plan.timing.post_sleep_s
                    };
                    if sleep_for(exec.clock(), secs, interrupt) {
                        Ok(())
                    } else {
                        interrupted = true;
                        Err("interrupted".into())
                    }
                }
                Step::Workload => exec.run_workload(config, &dir, interrupt),
                Step::StopMicSamplers => stop_all(&mut mic_tasks),
                Step::StopHostSamplers => stop_all(&mut host_tasks),
                Step::CollectMicFiles => (0..config.nodes)
                    .flat_map(|n| (0..config.mics_per_node).map(move |d| (n, d)))
                    .try_for_each(|(n, d)| exec.collect_mic(n, d, &dir.join(mic_log_name(n, d))))
                    .and_then(|_| {
                        let missing: Vec<String> = art
                            .declared_files()
                            .into_iter()
                            .filter(|p| fs::metadata(p).map_or(true, |m| m.len() == 0))
                            .map(|p| p.display().to_string())
                            .collect();
                        if missing.is_empty() {
                            Ok(())
                        } else {
                            Err(format!("missing or empty: {}", missing.join(", ")))
                        }
                    }),
                Step::Cooldown => unreachable!(),
            }
        };
        let end = exec.clock().now();
        log.record(step, start, end, result.is_ok());
        if let Err(cause) = result {
            failure = Some((step, cause));
        }
    }

    // never leave samplers behind, whatever happened
    let _ = stop_all(&mut mic_tasks);
    let _ = stop_all(&mut host_tasks);

    if !interrupted && !interrupt.is_stopped() {
        let start = exec.clock().now();
        let ok = injected != Some(Step::Cooldown.number());
        sleep_for(exec.clock(), plan.timing.cooldown_s, interrupt);
        log.record(Step::Cooldown, start, exec.clock().now(), ok);
        if !ok && failure.is_none() {
            failure = Some((Step::Cooldown, "injected failure".into()));
        }
    }
    if let Some((step, cause)) = failure {
        art.status = RunStatus::Failed {
            step: step.number(),
            cause,
        };
    }
    art.steps = log.records;
    art.orphan_samplers = exec.live_samplers();
    art
}

fn stop_all(tasks: &mut Vec<Box<dyn SamplerTask>>) -> Result<(), String> {
    let mut errors = Vec::new();
    for t in tasks.drain(..) {
        if let Err(e) = t.stop() {
            errors.push(e);
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors.join("; "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub config: RunConfig,
    #[serde(flatten)]
    pub status: RunStatus,
    pub files: Vec<FileEntry>,
    pub steps: Vec<StepRecord>,
    pub warnings: Vec<Warning>,
}

#[derive(Debug, Error)]
pub enum CollectError {
    #[error("declared file missing: {}", .0.display())]
    Missing(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn sha256_file(path: &Path) -> Result<(u64, String), CollectError> {
    let bytes = fs::read(path).map_err(|source| CollectError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok((bytes.len() as u64, hex::encode(Sha256::digest(&bytes))))
}

/// Gathers a run's files under `<out_dir>/<run_id>/` and writes its manifest.
/// A failed run lists whatever files it produced; an ok run must have all.
pub fn collect(run: &RunArtifacts, out_dir: &Path) -> Result<Manifest, CollectError> {
    let dest = out_dir.join(&run.run_id);
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CollectError::Io { path, source }
    };
    fs::create_dir_all(&dest).map_err(io(&dest))?;
    let mut files = Vec::new();
    let mut declared: Vec<PathBuf> = run.declared_files().into_iter().cloned().collect();
    declared.push(run.dir.join(STEPS_LOG));
    for src in declared {
        if !src.exists() {
            if run.status.is_ok() && src.file_name().is_some_and(|n| n != STEPS_LOG) {
                return Err(CollectError::Missing(src));
            }
            continue;
        }
        let name = src.file_name().expect("file path").to_string_lossy().into_owned();
        let target = dest.join(&name);
        if fs::canonicalize(&src).ok() != fs::canonicalize(&target).ok() {
            fs::copy(&src, &target).map_err(io(&src))?;
        }
        let (bytes, sha256) = sha256_file(&target)?;
        files.push(FileEntry { name, bytes, sha256 });
    }
    files.sort_by(|a, b| a.name.cmp(&b.name));
    let manifest = Manifest {
        run_id: run.run_id.clone(),
        config: run.config.clone(),
        status: run.status.clone(),
        files,
        steps: run.steps.clone(),
        warnings: run.warnings.clone(),
    };
    let path = dest.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(io(&path))?;
    Ok(manifest)
}

pub fn read_manifest(run_dir: &Path) -> Option<Manifest> {
    let text = fs::read_to_string(run_dir.join(MANIFEST)).ok()?;
    serde_json::from_str(&text).ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRunEntry {
    pub run_id: String,
    #[serde(flatten)]
    pub status: RunStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub name: String,
    pub planned_runs: usize,
    pub runs: Vec<ExperimentRunEntry>,
    /// False until every planned run has finished without interruption.
    pub complete: bool,
}

impl ExperimentManifest {
    pub fn all_ok(&self) -> bool {
        self.complete && self.runs.iter().all(|r| r.status.is_ok())
    }
}

fn write_experiment(out_dir: &Path, m: &ExperimentManifest) -> Result<(), CollectError> {
    let path = out_dir.join(EXPERIMENT_MANIFEST);
    let json = serde_json::to_string_pretty(m).expect("experiment manifest serializes");
    fs::write(&path, json).map_err(|source| CollectError::Io { path, source })
}

/// Runs every configuration of the plan in order, collecting each run and
/// keeping the experiment manifest current after every run.
pub fn run_experiment(
    plan: &ExperimentPlan,
    exec: &mut dyn Executor,
    out_dir: &Path,
    interrupt: &StopSignal,
) -> Result<(ExperimentManifest, Vec<RunArtifacts>), CollectError> {
    let configs = enumerate_runs(plan).map_err(|e| CollectError::Io {
        path: out_dir.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()),
    })?;
    fs::create_dir_all(out_dir).map_err(|source| CollectError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut manifest = ExperimentManifest {
        name: plan.name.clone(),
        planned_runs: configs.len(),
        runs: Vec::new(),
        complete: false,
    };
    write_experiment(out_dir, &manifest)?;
    let mut all = Vec::new();
    for (i, cfg) in configs.iter().enumerate() {
        if interrupt.is_stopped() {
            break;
        }
        let art = execute_run(i, cfg, plan, exec, out_dir, interrupt);
        collect(&art, out_dir)?;
        manifest.runs.push(ExperimentRunEntry {
            run_id: art.run_id.clone(),
            status: art.status.clone(),
        });
        write_experiment(out_dir, &manifest)?;
        all.push(art);
    }
    manifest.complete = !interrupt.is_stopped() && manifest.runs.len() == configs.len();
    write_experiment(out_dir, &manifest)?;
    Ok((manifest, all))
}
