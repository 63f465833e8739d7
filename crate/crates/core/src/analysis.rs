//! End-to-end analysis of one run: parse, synchronize, decompose phases,
//! attribute power and compute metrics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, CounterNames, MetricError, CACHE_LINE_BYTES};
use crate::model::{validate_anchor_stream, validate_event_stream, Device, DeviceStateReport, PhaseTimings, Precision, RunConfig, RunReport, Validate, Violation};
use crate::par::{self, ExecMode};
use crate::phases::{profile_phases, PhaseError};
use crate::power::{attribute_power, build_state_windows, host_comm_intervals, DeviceSpans, PowerError, StateWindows};
use crate::sync::{stream_anchors, synchronize, StreamId, SyncError, SyncTolerances, SyncedTimeline};
use crate::trace::{self, load_run_dir, LoadError, ParsedRun};
use crate::warning::{Warning, WarningKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub config: RunConfig,
    pub tolerances: SyncTolerances,
    pub counter_names: CounterNames,
    pub cache_line_bytes: u64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            config: RunConfig::default(),
            tolerances: SyncTolerances::default(),
            counter_names: CounterNames::default(),
            cache_line_bytes: CACHE_LINE_BYTES,
        }
    }
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("synchronization: {0}")]
    Sync(#[from] SyncError),
    #[error("phases: {0}")]
    Phase(#[from] PhaseError),
    #[error("power: {0}")]
    Power(#[from] PowerError),
    #[error("metrics: {0}")]
    Metric(#[from] MetricError),
    #[error("{0}: stream has no samples")]
    NoSamples(Device),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub report: RunReport,
    pub per_rank_phases: BTreeMap<u32, PhaseTimings>,
    pub offsets: BTreeMap<StreamId, f64>,
    /// Elements over instructions from the offload counters, when present.
    pub measured_vector_intensity: Option<f64>,
    pub pci_note: Option<String>,
    #[serde(skip)]
    pub windows: StateWindows,
    pub warnings: Vec<Warning>,
}

impl Analysis {
    pub fn device(&self, device: Device) -> Option<&DeviceStateReport> {
        self.report.device_states.iter().find(|d| d.device == device)
    }
}

/// Nodes and devices implied by the sampler logs present; other fields come
/// from `base`.
pub fn infer_config(parsed: &ParsedRun, base: &RunConfig) -> RunConfig {
    let nodes = parsed
        .host_power
        .keys()
        .copied()
        .chain(parsed.mic_power.keys().map(|k| k.0))
        .max()
        .map_or(base.nodes, |n| n + 1);
    let mics = parsed.mic_power.keys().map(|k| k.1 + 1).max().unwrap_or(0);
    RunConfig {
        nodes,
        mics_per_node: mics,
        ..base.clone()
    }
}

fn spans(parsed: &ParsedRun, tl: &SyncedTimeline) -> Result<(DeviceSpans, Vec<(Device, Vec<(f64, f64)>)>), AnalysisError> {
    let mut spans = DeviceSpans::new();
    let mut series = Vec::new();
    let mut add = |device: Device, stream: StreamId, pts: Vec<(f64, f64)>| -> Result<(), AnalysisError> {
        let off = tl.offset(stream)?;
        let pts: Vec<(f64, f64)> = pts.into_iter().map(|(t, w)| (t + off, w)).collect();
        let (first, last) = match (pts.first(), pts.last()) {
            (Some(a), Some(b)) => (a.0, b.0),
            _ => return Err(AnalysisError::NoSamples(device)),
        };
        spans.insert(device, (first, last));
        series.push((device, pts));
        Ok(())
    };
    for (&node, samples) in &parsed.host_power {
        add(
            Device::Host { node },
            StreamId::Host(node),
            samples.iter().map(|s| (s.anchor.tfs, s.total_watts)).collect(),
        )?;
    }
    for (&(node, device), samples) in &parsed.mic_power {
        add(
            Device::Mic { node, device },
            StreamId::Mic(node, device),
            samples.iter().map(|s| (s.anchor.tfs, s.total_watts)).collect(),
        )?;
    }
    Ok((spans, series))
}

/// Bandwidth with undefined cases downgraded to a warning and reported as 0.
fn bandwidth_or_warn(what: &str, mem: u64, freq: f64, cycles: u64, warnings: &mut Vec<Warning>) -> f64 {
    match metrics::bandwidth_bps(mem, freq, cycles) {
        Ok(v) => v,
        Err(e) => {
            warnings.push(Warning::new(WarningKind::UndefinedBandwidth, format!("{what}: {e}")));
            0.0
        }
    }
}

pub fn analyze_parsed(parsed: &ParsedRun, opts: &AnalysisOptions, mode: ExecMode) -> Result<Analysis, AnalysisError> {
    let cfg = &opts.config;
    let names = &opts.counter_names;
    let mut warnings = Vec::new();
    let timeline = synchronize(parsed, &opts.tolerances)?;
    let profile = profile_phases(&parsed.app, &parsed.offloads, opts.tolerances.combined(), &mut warnings)?;

    for r in parsed.offloads.iter().filter(|r| r.mic_time_s == 0.0 && r.cpu_time_s > 0.0) {
        warnings.push(Warning::new(
            WarningKind::HostFallbackOffload,
            format!(
                "rank {} tag {}: zero device time with {:.6} s CPU time; force may have run on the host",
                r.rank, r.tag, r.cpu_time_s
            ),
        ));
    }

    let (spans, series) = spans(parsed, &timeline)?;
    let windows = build_state_windows(
        cfg,
        Some(&profile.root),
        &timeline,
        &parsed.app,
        &parsed.offloads,
        &spans,
        &mut warnings,
    )?;
    let device_states: Vec<DeviceStateReport> = par::try_map(mode, &series, |(device, pts)| {
        attribute_power(*device, pts, &windows.per_device[device])
    })?;
    for d in device_states.iter().filter(|d| d.low_sample_warning) {
        warnings.push(Warning::new(
            WarningKind::LowSampleCount,
            format!(
                "{}: {} idle / {} active samples (fewer than {} in a state)",
                d.device,
                d.idle_samples,
                d.active_samples,
                crate::model::MIN_STATE_SAMPLES
            ),
        ));
    }

    // device metrics are exact sums over offload records
    let mic_misses = metrics::offload_counter_total(&parsed.offloads, &names.mic_llc_miss);
    let mic_cycles = metrics::offload_counter_total(&parsed.offloads, &names.mic_unhalted);
    let mic_mem_bytes = metrics::memory_bytes_with_line(mic_misses, opts.cache_line_bytes);
    let mic_bandwidth_bps = if parsed.offloads.is_empty() {
        0.0
    } else {
        bandwidth_or_warn("device memory", mic_mem_bytes, cfg.mic_frequency_hz, mic_cycles, &mut warnings)
    };

    // host counters only accumulate inside communication windows
    let (mut host_misses, mut host_cycles) = (0u64, 0u64);
    for (&node, perf) in &parsed.host_perf {
        let Some(rank) = parsed.app.keys().copied().find(|r| cfg.node_of_rank(*r) == node) else {
            continue;
        };
        let comm = host_comm_intervals(&parsed.app[&rank], &timeline)?;
        let off = timeline.offset(StreamId::Host(node))?;
        let inside = perf.iter().filter(|s| {
            let g = s.anchor.tfs + off;
            let i = comm.partition_point(|iv| iv.0 <= g);
            i > 0 && g < comm[i - 1].1
        });
        let (m, c) = metrics::host_counter_totals(inside, names);
        host_misses += m;
        host_cycles += c;
    }
    let host_comm_mem_bytes = metrics::memory_bytes_with_line(host_misses, opts.cache_line_bytes);
    let host_comm_bandwidth_bps = if parsed.host_perf.is_empty() {
        0.0
    } else {
        bandwidth_or_warn("host communication memory", host_comm_mem_bytes, cfg.host_frequency_hz, host_cycles, &mut warnings)
    };

    let pci_time: f64 = profile.per_rank.values().map(|p| p.pci_transfer_s).sum();
    let (pci_mem_bytes, pci_bandwidth_bps, pci_note) = match metrics::pci_metrics(&parsed.offloads, pci_time) {
        Ok(m) => (m.bytes, m.bandwidth_bps, m.note),
        Err(e) => {
            warnings.push(Warning::new(WarningKind::UndefinedBandwidth, format!("PCI: {e}")));
            let bytes = parsed.offloads.iter().map(|r| r.bytes_total()).sum();
            (bytes, 0.0, Some(e.to_string()))
        }
    };

    let elements = metrics::offload_counter_total(&parsed.offloads, &names.mic_vpu_elements);
    let instructions = metrics::offload_counter_total(&parsed.offloads, &names.mic_vpu_instructions);
    let measured_vector_intensity = match metrics::vectorization_intensity(elements, instructions, cfg.precision) {
        Ok(vi) => {
            if !vi.within_bounds {
                warnings.push(vi_warning("measured", vi.value, cfg.precision));
            }
            Some(vi.value)
        }
        Err(_) => None,
    };
    if !metrics::vector_intensity_in_bounds(cfg.vector_intensity, cfg.precision) {
        warnings.push(vi_warning("configured", cfg.vector_intensity, cfg.precision));
    }

    let throughput_flops =
        metrics::throughput_flops(cfg.mic_cores, cfg.vector_intensity, cfg.ops_per_cycle, cfg.mic_frequency_hz);
    let mic_total: f64 = profile.per_rank.values().map(|p| p.mic_compute_s).sum();
    let work_flop = metrics::work_flop(throughput_flops, mic_total);
    let total_energy_j = device_states.iter().map(|d| d.energy_j).sum();

    Ok(Analysis {
        report: RunReport {
            config: cfg.clone(),
            phases: profile.root,
            device_states,
            mic_mem_bytes,
            host_comm_mem_bytes,
            pci_mem_bytes,
            mic_bandwidth_bps,
            host_comm_bandwidth_bps,
            pci_bandwidth_bps,
            throughput_flops,
            work_flop,
            total_energy_j,
        },
        per_rank_phases: profile.per_rank,
        offsets: timeline.offsets,
        measured_vector_intensity,
        pci_note,
        windows,
        warnings,
    })
}

fn vi_warning(which: &str, value: f64, precision: Precision) -> Warning {
    Warning::new(
        WarningKind::VectorIntensityBounds,
        format!(
            "{which} vectorization intensity {value:.3} outside [1, {}] for {precision} precision",
            precision.max_vector_intensity()
        ),
    )
}

/// Loads and analyzes one run directory.
pub fn analyze_dir(dir: &Path, opts: &AnalysisOptions, mode: ExecMode) -> Result<Analysis, AnalysisError> {
    let parsed = load_run_dir(dir, mode)?;
    analyze_parsed(&parsed, opts, mode)
}

/// Analyzes independent run directories, concurrently in parallel mode.
/// Results keep the input order.
pub fn analyze_many<F>(
    dirs: &[PathBuf],
    options_for: F,
    mode: ExecMode,
) -> Vec<Result<Analysis, AnalysisError>>
where
    F: Fn(&Path) -> AnalysisOptions + Sync,
{
    par::map(mode, dirs, |d| analyze_dir(d, &options_for(d), ExecMode::Sequential))
}

/// Run configuration for a directory: from its manifest, else from an
/// oracle truth file, else inferred from the sampler logs present.
pub fn run_config_for_dir(dir: &Path, base: &RunConfig) -> RunConfig {
    if let Some(m) = crate::orchestrator::read_manifest(dir) {
        return m.config;
    }
    let truth = std::fs::read_to_string(dir.join(crate::synth::TRUTH_FILE))
        .ok()
        .and_then(|t| serde_json::from_str::<crate::synth::GroundTruth>(&t).ok());
    if let Some(t) = truth {
        return t.config;
    }
    match load_run_dir(dir, ExecMode::Sequential) {
        Ok(parsed) => infer_config(&parsed, base),
        Err(_) => base.clone(),
    }
}

/// Checks parsed artifacts without computing metrics: every record's
/// invariants and each stream's anchor consistency. Returns one line per
/// violation.
pub fn validate_run(parsed: &ParsedRun, tolerances: &SyncTolerances) -> Vec<String> {
    let mut out = Vec::new();
    let mut push = |what: String, v: Vec<Violation>| out.extend(v.into_iter().map(|v| format!("{what}: {v}")));
    for (node, samples) in &parsed.host_power {
        for (i, s) in samples.iter().enumerate() {
            push(format!("{}[{i}]", trace::host_log_name(*node)), s.validate());
        }
    }
    for (node, samples) in &parsed.host_perf {
        for (i, s) in samples.iter().enumerate() {
            push(format!("{} counters[{i}]", trace::host_log_name(*node)), s.validate());
        }
    }
    for (&(node, device), samples) in &parsed.mic_power {
        for (i, s) in samples.iter().enumerate() {
            push(format!("{}[{i}]", trace::mic_log_name(node, device)), s.validate());
        }
    }
    for r in &parsed.offloads {
        push(format!("offload rank {} tag {}", r.rank, r.tag), r.validate());
    }
    for tl in parsed.app.values() {
        push(format!("app rank {}", tl.rank), tl.validate());
    }
    for (id, anchors) in stream_anchors(parsed) {
        let tol = tolerances.for_stream(id);
        let v = match id {
            StreamId::App(_) => validate_event_stream(&anchors, tol),
            _ => validate_anchor_stream(&anchors, tol),
        };
        push(format!("stream {id}"), v);
    }
    out
}

/// Column set of the flat per-run table. Depends only on the tool version.
pub const CSV_COLUMNS: [&str; 31] = [
    "run_id",
    "system_name",
    "nodes",
    "mics_per_node",
    "problem_size",
    "host_frequency_hz",
    "mic_cores",
    "host_compute_s",
    "halo_exchange_s",
    "reduce_s",
    "mic_compute_s",
    "pci_transfer_s",
    "loop_total_s",
    "pci_method",
    "host_idle_w",
    "host_active_w",
    "mic_idle_w",
    "mic_active_w",
    "host_energy_j",
    "mic_energy_j",
    "total_energy_j",
    "mic_mem_bytes",
    "host_comm_mem_bytes",
    "pci_bytes",
    "mic_bandwidth_bps",
    "host_comm_bandwidth_bps",
    "pci_bandwidth_bps",
    "vector_intensity",
    "measured_vector_intensity",
    "throughput_flops",
    "work_flop",
];

/// One CSV row, aligned with [`CSV_COLUMNS`]. Per-state powers are means over
/// the devices of a class; energies are sums.
pub fn csv_row(run_id: &str, a: &Analysis) -> Vec<String> {
    let r = &a.report;
    let c = &r.config;
    let p = &r.phases;
    let class = |host: bool| {
        let ds: Vec<&DeviceStateReport> = r
            .device_states
            .iter()
            .filter(|d| matches!(d.device, Device::Host { .. }) == host)
            .collect();
        let n = ds.len().max(1) as f64;
        (
            ds.iter().map(|d| d.idle_watts_avg).sum::<f64>() / n,
            ds.iter().map(|d| d.active_watts_avg).sum::<f64>() / n,
            ds.iter().map(|d| d.energy_j).sum::<f64>(),
        )
    };
    let (hi, ha, he) = class(true);
    let (mi, ma, me) = class(false);
    let row = vec![
        run_id.to_string(),
        c.system_name.clone(),
        c.nodes.to_string(),
        c.mics_per_node.to_string(),
        c.problem_size.to_string(),
        c.host_frequency_hz.to_string(),
        c.mic_cores.to_string(),
        p.host_compute_s.to_string(),
        p.halo_exchange_s.to_string(),
        p.reduce_s.to_string(),
        p.mic_compute_s.to_string(),
        p.pci_transfer_s.to_string(),
        p.loop_total_s.to_string(),
        p.pci_method.to_string(),
        hi.to_string(),
        ha.to_string(),
        mi.to_string(),
        ma.to_string(),
        he.to_string(),
        me.to_string(),
        r.total_energy_j.to_string(),
        r.mic_mem_bytes.to_string(),
        r.host_comm_mem_bytes.to_string(),
        r.pci_mem_bytes.to_string(),
        r.mic_bandwidth_bps.to_string(),
        r.host_comm_bandwidth_bps.to_string(),
        r.pci_bandwidth_bps.to_string(),
        c.vector_intensity.to_string(),
        a.measured_vector_intensity.map(|v| v.to_string()).unwrap_or_default(),
        r.throughput_flops.to_string(),
        r.work_flop.to_string(),
    ];
    debug_assert_eq!(row.len(), CSV_COLUMNS.len());
    row
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, Scenario};
    use crate::trace::{app, host, mic, offload};

    fn parse(files: &BTreeMap<String, String>) -> ParsedRun {
        let mut p = ParsedRun::default();
        for (name, text) in files {
            match crate::trace::classify(name).unwrap() {
                crate::trace::ArtifactKind::Host(n) => p.insert_host(n, host::parse_host_sampler(text).unwrap()),
                crate::trace::ArtifactKind::Mic(n, d) => {
                    p.mic_power.insert((n, d), mic::parse_mic_sampler(text).unwrap());
                }
                crate::trace::ArtifactKind::App => p.app = app::parse_app_output(text).unwrap(),
                crate::trace::ArtifactKind::Offload => p.offloads = offload::parse_offload_report(text).unwrap(),
            }
        }
        p
    }

    #[test]
    fn recovers_small_scenario() {
        let s = Scenario {
            seed: 21,
            iterations: 40,
            pre_run_s: 12.0,
            post_run_s: 5.0,
            ..Scenario::default()
        };
        let run = generate(&s).unwrap();
        let parsed = parse(&run.files);
        let opts = AnalysisOptions {
            config: s.config.clone(),
            ..AnalysisOptions::default()
        };
        let a = analyze_parsed(&parsed, &opts, ExecMode::Sequential).unwrap();
        let t = &run.truth;
        assert!((a.report.phases.host_compute_s - t.phases.host_compute_s).abs() < 1e-4);
        assert!((a.report.phases.pci_transfer_s - t.phases.pci_transfer_s).abs() < 1e-4);
        for (id, off) in &t.offsets {
            assert!((a.offsets[id] - off).abs() <= opts.tolerances.for_stream(*id), "{id}");
        }
        for d in &t.device_states {
            let got = a.device(d.device).unwrap();
            assert!((got.idle_watts_avg - d.idle_watts_avg).abs() / d.idle_watts_avg < 0.01, "{}", d.device);
            assert!((got.active_watts_avg - d.active_watts_avg).abs() / d.active_watts_avg < 0.01, "{}", d.device);
            assert!((got.energy_j - d.energy_j).abs() / d.energy_j < 0.015, "{}", d.device);
        }
        assert_eq!(a.report.pci_mem_bytes, t.pci_bytes);
        assert!((a.report.mic_bandwidth_bps - t.mic_bandwidth_bps).abs() <= 1e-9 * t.mic_bandwidth_bps);
        // comm windows span a handful of samples, so edge samples weigh in
        assert!((a.report.host_comm_bandwidth_bps - t.host_comm_bandwidth_bps).abs() / t.host_comm_bandwidth_bps < 0.1);
        assert!((a.measured_vector_intensity.unwrap() - 2.6).abs() < 1e-6);
        assert_eq!(csv_row("r", &a).len(), CSV_COLUMNS.len());
        let seq = analyze_parsed(&parsed, &opts, ExecMode::Parallel).unwrap();
        assert_eq!(seq, a);
    }

    #[test]
    fn inferred_config_counts_streams() {
        let s = Scenario {
            seed: 2,
            iterations: 2,
            pre_run_s: 12.0,
            config: RunConfig {
                nodes: 2,
                mics_per_node: 2,
                ..RunConfig::default()
            },
            ..Scenario::default()
        };
        let parsed = parse(&generate(&s).unwrap().files);
        let cfg = infer_config(&parsed, &RunConfig::default());
        assert_eq!((cfg.nodes, cfg.mics_per_node), (2, 2));
    }
}
