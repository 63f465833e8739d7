//! Experiment plans and run enumeration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Precision, RunConfig, DEFAULT_OPS_PER_CYCLE, DEFAULT_VECTOR_INTENSITY};
use crate::synth::Scenario;

/// A single value or a list, for plan fields that span several settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn values(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

/// Static configuration entry; list-valued fields expand to their product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticConfig {
    pub system_name: String,
    pub nodes: OneOrMany<u32>,
    pub mics_per_node: OneOrMany<u32>,
    pub problem_size: OneOrMany<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpacePoint {
    pub host_frequency_hz: OneOrMany<f64>,
    pub mic_cores: OneOrMany<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Timing {
    pub pre_sleep_s: f64,
    pub post_sleep_s: f64,
    pub cooldown_s: f64,
}

impl Default for Timing {
    fn default() -> Self {
        Self {
            pre_sleep_s: 20.0,
            post_sleep_s: 10.0,
            cooldown_s: 60.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecutorKind {
    Shell,
    #[default]
    Simulated,
}

impl std::str::FromStr for ExecutorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shell" => Ok(ExecutorKind::Shell),
            "simulated" => Ok(ExecutorKind::Simulated),
            _ => Err(format!("unknown executor `{s}` (expected shell or simulated)")),
        }
    }
}

/// Workload command template. Variables: `{ranks}`, `{nodes}`,
/// `{mics_per_node}`, `{size}`, `{mic_cores}`, `{host_frequency_hz}`,
/// `{system}`, `{run_dir}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Workload {
    pub command: String,
}

impl Default for Workload {
    fn default() -> Self {
        Self {
            command: "mpirun -np {ranks} ./CoMD-mpi -e -x {size} -y {size} -z {size}".into(),
        }
    }
}

/// Accelerator values that are not part of the configuration space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Calibration {
    pub mic_frequency_hz: f64,
    pub vector_intensity: f64,
    pub ops_per_cycle: f64,
    pub precision: Precision,
}

impl Default for Calibration {
    fn default() -> Self {
        Self {
            mic_frequency_hz: 1.1e9,
            vector_intensity: DEFAULT_VECTOR_INTENSITY,
            ops_per_cycle: DEFAULT_OPS_PER_CYCLE,
            precision: Precision::Double,
        }
    }
}

/// Remote command templates for the shell executor. Variables: `{host}`,
/// `{node}`, `{device}`, `{output}` and, for collection, `{source}` and
/// `{dest}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShellTemplates {
    /// Host name per node; missing entries default to `node<N>`.
    pub hosts: Vec<String>,
    pub host_sampler: String,
    pub mic_sampler: String,
    /// Where a MIC sampler writes on the device side.
    pub mic_output: String,
    pub collect: String,
    /// Seconds to wait for a stopped process before killing it.
    pub stop_grace_s: f64,
}

impl Default for ShellTemplates {
    fn default() -> Self {
        Self {
            hosts: Vec::new(),
            host_sampler: "ssh {host} phiprof sample --kind host_live --output {output}".into(),
            mic_sampler: "ssh {host}-mic{device} phiprof sample --kind mic_replay --source /tmp/power --output {output}".into(),
            mic_output: "/tmp/mic-{node}-{device}.log".into(),
            collect: "scp {host}-mic{device}:{source} {dest}".into(),
            stop_grace_s: 2.0,
        }
    }
}

/// Injected failure for exercising the failure path of the simulated
/// executor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureInjection {
    pub step: u8,
    /// Restrict to one run (0-based position in the run list).
    #[serde(default)]
    pub run_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub name: String,
    pub static_configs: Vec<StaticConfig>,
    pub config_space: Vec<SpacePoint>,
    pub workload: Workload,
    pub timing: Timing,
    pub executor: ExecutorKind,
    /// Virtual time runs this many times faster than real time.
    pub time_divisor: f64,
    pub calibration: Calibration,
    pub shell: ShellTemplates,
    /// Base scenario for the simulated executor.
    pub simulation: Scenario,
    pub failure: Option<FailureInjection>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            static_configs: Vec::new(),
            config_space: Vec::new(),
            workload: Workload::default(),
            timing: Timing::default(),
            executor: ExecutorKind::default(),
            time_divisor: 1.0,
            calibration: Calibration::default(),
            shell: ShellTemplates::default(),
            simulation: Scenario::default(),
            failure: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("plan: {0}")]
    Format(#[from] toml::de::Error),
    #[error("invalid plan: {0}")]
    Invalid(String),
    #[error("plan yields no runs: {0}")]
    Empty(&'static str),
}

impl ExperimentPlan {
    pub fn from_toml_str(text: &str) -> Result<Self, PlanError> {
        let plan: Self = toml::from_str(text)?;
        plan.check()?;
        Ok(plan)
    }

    pub fn check(&self) -> Result<(), PlanError> {
        let t = &self.timing;
        let mut problems = Vec::new();
        for (name, v) in [("pre_sleep_s", t.pre_sleep_s), ("post_sleep_s", t.post_sleep_s), ("cooldown_s", t.cooldown_s)] {
            if !(v.is_finite() && v >= 0.0) {
                problems.push(format!("{name} must be >= 0"));
            }
        }
        if t.pre_sleep_s < 10.0 {
            problems.push("pre_sleep_s must be >= 10 so the idle baseline holds 10 s of samples".into());
        }
        if !(self.time_divisor >= 1.0) {
            problems.push("time_divisor must be >= 1".into());
        }
        if let Some(f) = &self.failure {
            if !(1..=9).contains(&f.step) {
                problems.push(format!("failure step {} is not in 1..=9", f.step));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(PlanError::Invalid(problems.join("; ")))
        }
    }
}

/// Static configurations outer, configuration space inner.
pub fn enumerate_runs(plan: &ExperimentPlan) -> Result<Vec<RunConfig>, PlanError> {
    let mut statics = Vec::new();
    for s in &plan.static_configs {
        for nodes in s.nodes.values() {
            for mics in s.mics_per_node.values() {
                for size in s.problem_size.values() {
                    statics.push((s.system_name.clone(), nodes, mics, size));
                }
            }
        }
    }
    if statics.is_empty() {
        return Err(PlanError::Empty("no static configurations"));
    }
    let mut space = Vec::new();
    for p in &plan.config_space {
        for f in p.host_frequency_hz.values() {
            for c in p.mic_cores.values() {
                space.push((f, c));
            }
        }
    }
    if space.is_empty() {
        return Err(PlanError::Empty("empty configuration space"));
    }
    let cal = &plan.calibration;
    let mut out = Vec::with_capacity(statics.len() * space.len());
    for (system_name, nodes, mics_per_node, problem_size) in &statics {
        for &(host_frequency_hz, mic_cores) in &space {
            out.push(RunConfig {
                system_name: system_name.clone(),
                nodes: *nodes,
                mics_per_node: *mics_per_node,
                problem_size: *problem_size,
                host_frequency_hz,
                mic_cores,
                mic_frequency_hz: cal.mic_frequency_hz,
                vector_intensity: cal.vector_intensity,
                ops_per_cycle: cal.ops_per_cycle,
                precision: cal.precision,
            });
        }
    }
    Ok(out)
}

/// Directory name of the `index`-th run.
pub fn run_id(index: usize, c: &RunConfig) -> String {
    format!(
        "{index:03}-{}-n{}-m{}-s{}-f{:.2}-c{}",
        c.system_name,
        c.nodes,
        c.mics_per_node,
        c.problem_size,
        c.host_frequency_hz / 1e9,
        c.mic_cores
    )
}
