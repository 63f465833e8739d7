//! Executor that replays synthetic traces on a scaled clock.
//!
//! For each run a scenario is rendered into `<run>/.sim/`. Samplers replay
//! those traces through the ordinary sampler loop; MIC samplers write into
//! `<run>/.device/`, standing in for the card's file system. The workload
//! sleeps for the scenario's application span and then writes the
//! application output and offload report, re-anchored to the executor clock.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread::JoinHandle;

use crate::model::RunConfig;
use crate::sampler::{Clock, Sampler, SamplerKind, SamplerRegistry, SamplerSpec, ScaledClock, StopSignal};
use crate::synth::{generate, Scenario, SynthRun};
use crate::trace::{host_log_name, mic_log_name, APP_OUT, OFFLOAD_REPORT};

use super::plan::ExperimentPlan;
use super::{Executor, SamplerTask};

pub const SIM_DIR: &str = ".sim";
pub const DEVICE_DIR: &str = ".device";
/// Extra trace length beyond the post-run sleep, so replay never runs dry
/// before the samplers are stopped.
const TAIL_MARGIN_S: f64 = 5.0;
/// Real seconds allowed for starting the samplers and for the hand-off from
/// the baseline to the workload.
const LEAD_REAL_S: f64 = 0.05;

struct ReplayTask {
    stop: StopSignal,
    handle: JoinHandle<Result<u64, String>>,
}

impl SamplerTask for ReplayTask {
    fn stop(self: Box<Self>) -> Result<u64, String> {
        self.stop.stop();
        self.handle.join().map_err(|_| "sampler thread panicked".to_string())?
    }
}

pub struct SimulatedExecutor {
    clock: Arc<ScaledClock>,
    base: Scenario,
    pre_sleep_s: f64,
    post_sleep_s: f64,
    registry: SamplerRegistry,
    scenario: Option<Scenario>,
    run_dir: PathBuf,
    /// Samplers with loaded sources, by log name.
    opened: BTreeMap<String, Sampler>,
    /// Planned clock times of the first sample and of the workload start.
    epoch: f64,
    workload_at: f64,
}

impl SimulatedExecutor {
    pub fn new(plan: &ExperimentPlan) -> Self {
        Self {
            clock: Arc::new(ScaledClock::new(plan.time_divisor)),
            base: plan.simulation.clone(),
            pre_sleep_s: plan.timing.pre_sleep_s,
            post_sleep_s: plan.timing.post_sleep_s,
            registry: SamplerRegistry::new(),
            scenario: None,
            run_dir: PathBuf::new(),
            opened: BTreeMap::new(),
            epoch: 0.0,
            workload_at: 0.0,
        }
    }

    fn sim_dir(&self) -> PathBuf {
        self.run_dir.join(SIM_DIR)
    }

    fn device_dir(&self) -> PathBuf {
        self.run_dir.join(DEVICE_DIR)
    }

    fn lead(&self) -> f64 {
        (LEAD_REAL_S * self.clock.divisor()).max(1.0)
    }

    fn spawn(&mut self, name: &str, output: &Path) -> Result<Box<dyn SamplerTask>, String> {
        let mut sampler = self.opened.remove(name).ok_or_else(|| format!("no prepared sampler for {name}"))?;
        sampler.set_output(output);
        sampler.set_start_at(Some(self.epoch));
        let stop = StopSignal::new();
        let clock = Arc::clone(&self.clock);
        let guard = self.registry.enter();
        let s = stop.clone();
        let handle = std::thread::spawn(move || {
            let _guard = guard;
            sampler.run(clock.as_ref(), &s).map_err(|e| e.to_string())
        });
        Ok(Box::new(ReplayTask { stop, handle }))
    }

    fn render(&self, start_wall_s: f64) -> Result<SynthRun, String> {
        let mut s = self.scenario.clone().ok_or("run not prepared")?;
        s.start_wall_s = Some(start_wall_s);
        generate(&s).map_err(|e| e.to_string())
    }
}

impl Executor for SimulatedExecutor {
    fn clock(&self) -> &dyn Clock {
        self.clock.as_ref()
    }

    fn prepare(&mut self, index: usize, config: &RunConfig, run_dir: &Path) -> Result<(), String> {
        let mut s = self.base.clone();
        s.seed = s.seed.wrapping_add(index as u64);
        s.config = config.clone();
        s.pre_run_s = self.pre_sleep_s;
        s.post_run_s = self.post_sleep_s + TAIL_MARGIN_S;
        let lag = -(self.pre_sleep_s + self.lead());
        for n in 0..config.nodes {
            s.offsets.insert(format!("host-{n}"), lag);
            for d in 0..config.mics_per_node {
                s.offsets.insert(format!("mic-{n}-{d}"), lag);
            }
        }
        s.check().map_err(|e| e.to_string())?;
        self.scenario = Some(s);
        self.run_dir = run_dir.to_path_buf();
        let run = self.render(0.0)?;
        run.write_to(&self.sim_dir()).map_err(|e| e.to_string())?;
        fs::create_dir_all(self.device_dir()).map_err(|e| e.to_string())?;
        let s = self.scenario.as_ref().expect("just set");
        self.opened.clear();
        for n in 0..config.nodes {
            let name = host_log_name(n);
            let mut spec = SamplerSpec::replay(SamplerKind::HostReplay, self.sim_dir().join(&name), run_dir.join(&name));
            spec.period_s = s.host_period_s;
            self.opened.insert(name, Sampler::open(spec).map_err(|e| e.to_string())?);
            for d in 0..config.mics_per_node {
                let name = mic_log_name(n, d);
                let mut spec =
                    SamplerSpec::replay(SamplerKind::MicReplay, self.sim_dir().join(&name), self.device_dir().join(&name));
                spec.period_s = s.mic_period_s;
                self.opened.insert(name, Sampler::open(spec).map_err(|e| e.to_string())?);
            }
        }
        self.epoch = self.clock.now() + self.lead();
        self.workload_at = self.epoch - lag;
        Ok(())
    }

    fn start_host_sampler(&mut self, node: u32, output: &Path) -> Result<Box<dyn SamplerTask>, String> {
        self.spawn(&host_log_name(node), output)
    }

    fn start_mic_sampler(&mut self, node: u32, device: u32) -> Result<Box<dyn SamplerTask>, String> {
        let name = mic_log_name(node, device);
        let output = self.device_dir().join(&name);
        self.spawn(&name, &output)
    }

    fn run_workload(&mut self, _config: &RunConfig, run_dir: &Path, interrupt: &StopSignal) -> Result<(), String> {
        let start_wall = self.clock.wall_seconds_of_day() - self.clock.now() + self.workload_at;
        let run = self.render(start_wall)?;
        let until = self.workload_at + run.truth.app_span.1;
        while self.clock.now() < until {
            if interrupt.is_stopped() {
                return Err("workload interrupted".into());
            }
            self.clock.sleep((until - self.clock.now()).min(0.5));
        }
        for name in [APP_OUT, OFFLOAD_REPORT] {
            let p = run_dir.join(name);
            fs::write(&p, &run.files[name]).map_err(|e| format!("{}: {e}", p.display()))?;
        }
        Ok(())
    }

    fn collect_mic(&mut self, node: u32, device: u32, dest: &Path) -> Result<(), String> {
        let src = self.device_dir().join(mic_log_name(node, device));
        fs::copy(&src, dest).map(|_| ()).map_err(|e| format!("{}: {e}", src.display()))
    }

    fn live_samplers(&self) -> usize {
        self.registry.live()
    }
}
