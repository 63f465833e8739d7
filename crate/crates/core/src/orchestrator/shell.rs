//! Executor that drives real nodes through shell command templates.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use crate::model::RunConfig;
use crate::sampler::{Clock, RealClock, SamplerGuard, SamplerRegistry, StopSignal};
use crate::trace::{APP_OUT, OFFLOAD_REPORT};

use super::plan::{ExperimentPlan, ShellTemplates};
use super::{Executor, SamplerTask};

pub const OFFLOAD_REPORT_ENV: &str = "OFFLOAD_REPORT";
pub const WORKLOAD_STDERR: &str = "workload.err";

/// Replaces `{key}` placeholders; unknown keys are left as they are.
pub fn expand(template: &str, vars: &BTreeMap<&str, String>) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

fn sh(cmd: &str) -> Command {
    let mut c = Command::new("sh");
    c.arg("-c").arg(cmd);
    c
}

fn terminate(child: &mut Child, grace: Duration) {
    if let Ok(Some(_)) = child.try_wait() {
        return;
    }
    // SAFETY: plain signal delivery to a child we own.
    unsafe {
        libc::kill(child.id() as libc::pid_t, libc::SIGTERM);
    }
    let deadline = Instant::now() + grace;
    while Instant::now() < deadline {
        if let Ok(Some(_)) = child.try_wait() {
            return;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    let _ = child.kill();
    let _ = child.wait();
}

struct ProcessTask {
    child: Child,
    grace: Duration,
    _guard: SamplerGuard,
}

impl SamplerTask for ProcessTask {
    fn stop(mut self: Box<Self>) -> Result<u64, String> {
        if let Ok(Some(status)) = self.child.try_wait() {
            if !status.success() {
                return Err(format!("sampler exited early with {status}"));
            }
            return Ok(0);
        }
        terminate(&mut self.child, self.grace);
        Ok(0)
    }
}

pub struct ShellExecutor {
    clock: RealClock,
    templates: ShellTemplates,
    workload: String,
    registry: SamplerRegistry,
}

impl ShellExecutor {
    pub fn new(plan: &ExperimentPlan) -> Self {
        Self {
            clock: RealClock::new(),
            templates: plan.shell.clone(),
            workload: plan.workload.command.clone(),
            registry: SamplerRegistry::new(),
        }
    }

    fn host(&self, node: u32) -> String {
        self.templates
            .hosts
            .get(node as usize)
            .cloned()
            .unwrap_or_else(|| format!("node{node}"))
    }

    fn node_vars(&self, node: u32, device: Option<u32>) -> BTreeMap<&'static str, String> {
        let mut v = BTreeMap::from([("host", self.host(node)), ("node", node.to_string())]);
        if let Some(d) = device {
            v.insert("device", d.to_string());
        }
        v
    }

    fn spawn(&self, cmd: &str) -> Result<Box<dyn SamplerTask>, String> {
        let child = sh(cmd)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .spawn()
            .map_err(|e| format!("`{cmd}`: {e}"))?;
        Ok(Box::new(ProcessTask {
            child,
            grace: Duration::from_secs_f64(self.templates.stop_grace_s.max(0.0)),
            _guard: self.registry.enter(),
        }))
    }

    fn mic_output(&self, node: u32, device: u32) -> String {
        expand(&self.templates.mic_output, &self.node_vars(node, Some(device)))
    }
}

pub fn workload_vars(config: &RunConfig, run_dir: &Path) -> BTreeMap<&'static str, String> {
    BTreeMap::from([
        ("ranks", config.ranks().to_string()),
        ("nodes", config.nodes.to_string()),
        ("mics_per_node", config.mics_per_node.to_string()),
        ("size", config.problem_size.to_string()),
        ("mic_cores", config.mic_cores.to_string()),
        ("host_frequency_hz", format!("{:.0}", config.host_frequency_hz)),
        ("system", config.system_name.clone()),
        ("run_dir", run_dir.display().to_string()),
    ])
}

impl Executor for ShellExecutor {
    fn clock(&self) -> &dyn Clock {
        &self.clock
    }

    fn start_host_sampler(&mut self, node: u32, output: &Path) -> Result<Box<dyn SamplerTask>, String> {
        let mut vars = self.node_vars(node, None);
        vars.insert("output", output.display().to_string());
        self.spawn(&expand(&self.templates.host_sampler, &vars))
    }

    fn start_mic_sampler(&mut self, node: u32, device: u32) -> Result<Box<dyn SamplerTask>, String> {
        let mut vars = self.node_vars(node, Some(device));
        vars.insert("output", self.mic_output(node, device));
        self.spawn(&expand(&self.templates.mic_sampler, &vars))
    }

    fn run_workload(&mut self, config: &RunConfig, run_dir: &Path, interrupt: &StopSignal) -> Result<(), String> {
        let cmd = expand(&self.workload, &workload_vars(config, run_dir));
        let err_path = run_dir.join(WORKLOAD_STDERR);
        let stderr = fs::File::create(&err_path).map_err(|e| format!("{}: {e}", err_path.display()))?;
        let mut child = sh(&cmd)
            .env(OFFLOAD_REPORT_ENV, "2")
            .current_dir(run_dir)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(stderr)
            .spawn()
            .map_err(|e| format!("`{cmd}`: {e}"))?;
        let stdout = child.stdout.take().expect("piped stdout");
        let app_path = run_dir.join(APP_OUT);
        let rpt_path = run_dir.join(OFFLOAD_REPORT);
        let splitter = std::thread::spawn(move || -> std::io::Result<()> {
            let mut app = std::io::BufWriter::new(fs::File::create(app_path)?);
            let mut rpt = std::io::BufWriter::new(fs::File::create(rpt_path)?);
            for line in BufReader::new(stdout).lines() {
                let line = line?;
                let out = if line.contains("[Offload]") { &mut rpt } else { &mut app };
                writeln!(out, "{line}")?;
            }
            app.flush()?;
            rpt.flush()
        });
        let status = loop {
            if interrupt.is_stopped() {
                terminate(&mut child, Duration::from_secs(2));
                let _ = splitter.join();
                return Err("workload interrupted".into());
            }
            match child.try_wait() {
                Ok(Some(s)) => break s,
                Ok(None) => std::thread::sleep(Duration::from_millis(50)),
                Err(e) => return Err(e.to_string()),
            }
        };
        splitter
            .join()
            .map_err(|_| "output splitter panicked".to_string())?
            .map_err(|e| e.to_string())?;
        if status.success() {
            Ok(())
        } else {
            Err(format!("workload exited with {status}"))
        }
    }

    fn collect_mic(&mut self, node: u32, device: u32, dest: &Path) -> Result<(), String> {
        let mut vars = self.node_vars(node, Some(device));
        vars.insert("source", self.mic_output(node, device));
        vars.insert("dest", dest.display().to_string());
        let cmd = expand(&self.templates.collect, &vars);
        let status = sh(&cmd).stdin(Stdio::null()).status().map_err(|e| format!("`{cmd}`: {e}"))?;
        if status.success() {
            Ok(())
        } else {
            Err(format!("`{cmd}` exited with {status}"))
        }
    }

    fn live_samplers(&self) -> usize {
        self.registry.live()
    }
}
