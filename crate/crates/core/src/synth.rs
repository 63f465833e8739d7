//! Synthetic runs with known ground truth.
//!
//! A scenario declares a per-iteration phase schedule, offload series, power
//! levels and sampler placement; [`generate`] renders all four artifact kinds
//! plus a [`GroundTruth`] record of every quantity the analyzer should
//! recover. Output is a pure function of the scenario and its seed.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, CounterNames};
use crate::model::{
    AppTimeline, Device, DeviceStateReport, HostPowerSample, MicPowerSample, OffloadRecord, PciMethod, PerfSample,
    PhaseTimings, RunConfig, TimeAnchor, WallClock, SECONDS_PER_DAY,
};
use crate::power::{begin_event, compose_windows, end_event, offload_phase, StateWindows};
use crate::sync::{StreamId, END_EVENT, START_EVENT};
use crate::trace::{self, app::format_app_timeline, host::format_host_line, mic::format_mic_line};

pub const TRUTH_FILE: &str = "truth.json";

/// Mean per-iteration durations of the timestep phases, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseSchedule {
    pub position_s: f64,
    pub velocity_s: f64,
    /// Redistribution work excluding its inner transfer.
    pub redist_compute_s: f64,
    pub inner_transfer_s: f64,
    /// Force-phase halo exchange.
    pub halo_exchange_s: f64,
    pub reduce_s: f64,
    /// Fixed force-phase length; unset means offload + halo + reduce.
    pub force_s: Option<f64>,
}

impl Default for PhaseSchedule {
    fn default() -> Self {
        Self {
            position_s: 0.1,
            velocity_s: 0.05,
            redist_compute_s: 0.15,
            inner_transfer_s: 0.03,
            halo_exchange_s: 0.02,
            reduce_s: 0.01,
            force_s: None,
        }
    }
}

/// One offload per rank per iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OffloadSeries {
    pub mic_time_s: f64,
    /// Host-visible time beyond the device compute, i.e. PCI transfer.
    pub pci_overhead_s: f64,
    pub bytes_to_device: u64,
    pub bytes_from_device: u64,
    pub mic_llc_miss_per_s: f64,
    pub vpu_instructions_per_s: f64,
    /// When false the runtime reports a CPU time of zero.
    pub report_cpu_time: bool,
}

impl Default for OffloadSeries {
    fn default() -> Self {
        Self {
            mic_time_s: 0.5,
            pci_overhead_s: 0.007,
            bytes_to_device: 12_000_000,
            bytes_from_device: 12_000_000,
            mic_llc_miss_per_s: 2.0e8,
            vpu_instructions_per_s: 1.0e9,
            report_cpu_time: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerLevels {
    pub idle_watts: f64,
    pub active_watts: f64,
    #[serde(default)]
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HostCounterRates {
    pub comm_llc_miss_per_s: f64,
    pub other_llc_miss_per_s: f64,
    /// Fraction of nominal cycles that are unhalted.
    pub utilization: f64,
}

impl Default for HostCounterRates {
    fn default() -> Self {
        Self {
            comm_llc_miss_per_s: 5.0e7,
            other_llc_miss_per_s: 2.0e7,
            utilization: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub config: RunConfig,
    pub iterations: u32,
    /// Start event to first timestep.
    pub init_s: f64,
    /// Last timestep to end event.
    pub finalize_s: f64,
    /// Relative per-iteration spread of every phase; totals are preserved.
    pub jitter: f64,
    /// Unattributed loop time per iteration.
    pub loop_overhead_s: f64,
    pub pre_run_s: f64,
    pub post_run_s: f64,
    pub host_period_s: f64,
    pub mic_period_s: f64,
    /// Seconds of day at the origin; drawn from the seed when unset.
    pub start_wall_s: Option<f64>,
    pub phases: PhaseSchedule,
    pub offload: OffloadSeries,
    pub host_power: PowerLevels,
    pub mic_power: PowerLevels,
    pub host_counters: HostCounterRates,
    pub counter_names: CounterNames,
    /// True stream offsets by stream name (`host-0`, `mic-0-1`, `app-2`);
    /// unlisted streams get seeded defaults.
    pub offsets: BTreeMap<String, f64>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            seed: 1,
            config: RunConfig::default(),
            iterations: 100,
            init_s: 0.5,
            finalize_s: 0.3,
            jitter: 0.1,
            loop_overhead_s: 0.0005,
            pre_run_s: 20.0,
            post_run_s: 10.0,
            host_period_s: 0.010,
            mic_period_s: 0.050,
            start_wall_s: None,
            phases: PhaseSchedule::default(),
            offload: OffloadSeries::default(),
            host_power: PowerLevels {
                idle_watts: 60.0,
                active_watts: 160.0,
                noise_sigma: 2.0,
            },
            mic_power: PowerLevels {
                idle_watts: 100.0,
                active_watts: 190.0,
                noise_sigma: 2.0,
            },
            host_counters: HostCounterRates::default(),
            counter_names: CounterNames::default(),
            offsets: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible scenario: {0}")]
    Infeasible(String),
    #[error("scenario: {0}")]
    Format(#[from] toml::de::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, SynthError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Checks feasibility; every problem is listed.
    pub fn check(&self) -> Result<(), SynthError> {
        let mut problems = Vec::new();
        let p = &self.phases;
        let o = &self.offload;
        let durations = [
            ("position_s", p.position_s),
            ("velocity_s", p.velocity_s),
            ("redist_compute_s", p.redist_compute_s),
            ("inner_transfer_s", p.inner_transfer_s),
            ("halo_exchange_s", p.halo_exchange_s),
            ("reduce_s", p.reduce_s),
            ("mic_time_s", o.mic_time_s),
            ("pci_overhead_s", o.pci_overhead_s),
            ("init_s", self.init_s),
            ("finalize_s", self.finalize_s),
            ("loop_overhead_s", self.loop_overhead_s),
            ("post_run_s", self.post_run_s),
        ];
        for (name, v) in durations {
            if !(v.is_finite() && v >= 0.0) {
                problems.push(format!("{name} must be >= 0"));
            }
        }
        if self.iterations == 0 {
            problems.push("iterations must be >= 1".into());
        }
        if self.config.mics_per_node == 0 {
            problems.push("mics_per_node must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.jitter) {
            problems.push("jitter must be in [0, 1)".into());
        }
        if self.pre_run_s < 1.0 {
            problems.push("pre_run_s must be >= 1".into());
        }
        if !(self.host_period_s >= 0.002) || !(self.mic_period_s >= 0.002) {
            problems.push("sampler periods must be >= 2 ms".into());
        }
        for (name, lv) in [("host_power", &self.host_power), ("mic_power", &self.mic_power)] {
            if lv.idle_watts < 0.0 || lv.active_watts < 0.0 || lv.noise_sigma < 0.0 {
                problems.push(format!("{name}: power levels and noise must be >= 0"));
            }
        }
        if let Some(f) = p.force_s {
            let need = (1.0 + self.jitter) * (o.mic_time_s + o.pci_overhead_s + p.halo_exchange_s + p.reduce_s);
            if f < need {
                problems.push(format!(
                    "offload series ({need:.3} s worst case per iteration) longer than force phase ({f:.3} s)"
                ));
            }
        }
        for key in self.offsets.keys() {
            if key.parse::<StreamId>().is_err() {
                problems.push(format!("unknown stream `{key}` in offsets"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SynthError::Infeasible(problems.join("; ")))
        }
    }
}

/// Everything the analyzer should recover from a generated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub config: RunConfig,
    /// Seconds of day at global time zero.
    pub origin_wall_s: f64,
    pub offsets: BTreeMap<StreamId, f64>,
    /// Root-rank phases; all ranks share the schedule.
    pub phases: PhaseTimings,
    /// Global `[start, end]` of the application on the root rank.
    pub app_span: (f64, f64),
    pub windows: StateWindows,
    pub device_states: Vec<DeviceStateReport>,
    pub host_comm_mem_bytes: u64,
    pub host_comm_bandwidth_bps: f64,
    pub mic_mem_bytes: u64,
    pub mic_bandwidth_bps: f64,
    pub pci_bytes: u64,
    pub pci_bandwidth_bps: f64,
    pub measured_vector_intensity: f64,
    pub throughput_flops: f64,
    pub work_flop: f64,
    pub total_energy_j: f64,
}

impl GroundTruth {
    pub fn device(&self, device: Device) -> Option<&DeviceStateReport> {
        self.device_states.iter().find(|d| d.device == device)
    }
}

/// Rendered artifacts by file name, plus ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRun {
    pub files: BTreeMap<String, String>,
    pub truth: GroundTruth,
}

impl SynthRun {
    /// Writes the artifacts and `truth.json` into `dir` (created if needed).
    pub fn write_to(&self, dir: &Path) -> Result<(), SynthError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| SynthError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        for (name, text) in &self.files {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(io(&p))?;
        }
        let p = dir.join(TRUTH_FILE);
        let json = serde_json::to_string_pretty(&self.truth).expect("truth serializes");
        std::fs::write(&p, json).map_err(io(&p))
    }
}

fn ms(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn cents(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// `n` factors in `[1 - j, 1 + j]` rescaled to mean exactly 1.
fn spread(rng: &mut ChaCha8Rng, n: usize, j: f64) -> Vec<f64> {
    if j == 0.0 {
        return vec![1.0; n];
    }
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0 - j..=1.0 + j)).collect();
    let mean = raw.iter().sum::<f64>() / n as f64;
    raw.into_iter().map(|f| f / mean).collect()
}

fn contains(intervals: &[(f64, f64)], t: f64) -> bool {
    let i = intervals.partition_point(|iv| iv.0 <= t);
    i > 0 && t < intervals[i - 1].1
}

/// Strictly increasing sampler TFS values (ms resolution) up to `until`.
fn sampler_times(rng: &mut ChaCha8Rng, period: f64, until: f64) -> Vec<f64> {
    let drift = 1.0 + rng.gen_range(0.001..0.01);
    let mut out = Vec::with_capacity((until / period) as usize + 2);
    let mut t = 0.0f64;
    let mut last = -1.0;
    while t <= until {
        let mut v = ms(t);
        if v <= last {
            v = ms(last + 0.001);
        }
        out.push(v);
        last = v;
        t += period * drift * (1.0 + rng.gen_range(-0.02..0.02));
    }
    out
}

struct Schedule {
    events: Vec<(String, f64)>,
    timers: BTreeMap<String, f64>,
    host_active: Vec<(f64, f64)>,
    host_comm: Vec<(f64, f64)>,
    /// Per iteration: (offload begin, offload end, mic time, overhead).
    offloads: Vec<(f64, f64, f64, f64)>,
    mic_active: Vec<(f64, f64)>,
    end: f64,
    loop_total: f64,
    host_compute: f64,
    pci_total: f64,
    mic_total: f64,
}

fn build_schedule(s: &Scenario, rng: &mut ChaCha8Rng) -> Schedule {
    let n = s.iterations as usize;
    let p = &s.phases;
    let o = &s.offload;
    let mut f = || spread(rng, n, s.jitter);
    let (fp, fv, frc, fit, fh, fr, fm, fo) = (f(), f(), f(), f(), f(), f(), f(), f());
    let mut events = vec![(START_EVENT.to_string(), 0.0)];
    let mut host_idle = Vec::new();
    let mut host_comm = Vec::new();
    let mut offloads = Vec::with_capacity(n);
    let mut mic_active = Vec::with_capacity(n);
    let (mut pos, mut vel, mut redist, mut inner, mut halo, mut red, mut force) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut mic_total, mut pci_total) = (0.0, 0.0);
    let push = |events: &mut Vec<(String, f64)>, phase: &str, a: f64, b: f64| {
        events.push((begin_event(phase), a));
        events.push((end_event(phase), b));
    };
    let loop_start = s.init_s;
    let mut t = loop_start;
    let fraction = o.bytes_to_device as f64 / (o.bytes_to_device + o.bytes_from_device).max(1) as f64;
    let fraction = if o.bytes_to_device + o.bytes_from_device == 0 { 0.5 } else { fraction };
    for i in 0..n {
        let dp = p.position_s * fp[i];
        let dv = p.velocity_s * fv[i];
        let drc = p.redist_compute_s * frc[i];
        let dit = p.inner_transfer_s * fit[i];
        let dh = p.halo_exchange_s * fh[i];
        let dr = p.reduce_s * fr[i];
        let dm = o.mic_time_s * fm[i];
        let dov = o.pci_overhead_s * fo[i];
        push(&mut events, "position", t, t + dp);
        t += dp;
        push(&mut events, "velocity", t, t + dv);
        t += dv;
        events.push((begin_event("redistribute"), t));
        push(&mut events, "inner_transfer", t + drc, t + drc + dit);
        host_idle.push((t + drc, t + drc + dit));
        host_comm.push((t + drc, t + drc + dit));
        t += drc + dit;
        events.push((end_event("redistribute"), t));
        let f_len = p.force_s.unwrap_or(dm + dov + dh + dr);
        let f_start = t;
        events.push((begin_event("force"), t));
        let ob = t;
        let oe = t + dm + dov;
        push(&mut events, &offload_phase(i as u64), ob, oe);
        offloads.push((ob, oe, dm, dov));
        let ma = ob + dov * fraction;
        mic_active.push((ma, ma + dm));
        t = oe;
        push(&mut events, "halo_exchange", t, t + dh);
        host_comm.push((t, t + dh));
        t += dh;
        push(&mut events, "reduce", t, t + dr);
        host_comm.push((t, t + dr));
        let f_end = f_start + f_len;
        events.push((end_event("force"), f_end));
        host_idle.push((f_start, f_end));
        t = f_end + s.loop_overhead_s;
        pos += dp;
        vel += dv;
        redist += drc + dit;
        inner += dit;
        halo += dit + dh;
        red += dr;
        force += f_len;
        mic_total += dm;
        pci_total += dov;
    }
    let loop_total = t - loop_start;
    let end = t + s.finalize_s;
    events.push((END_EVENT.to_string(), end));
    let mut host_active = Vec::new();
    let mut cursor = 0.0;
    for (a, b) in crate::power::union(host_idle) {
        if a > cursor {
            host_active.push((cursor, a));
        }
        cursor = cursor.max(b);
    }
    if cursor < end {
        host_active.push((cursor, end));
    }
    let timers = [
        ("position", pos),
        ("velocity", vel),
        ("redistribute", redist),
        ("inner_transfer", inner),
        ("halo_exchange", halo),
        ("reduce", red),
        ("force", force),
        ("loop", loop_total),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    Schedule {
        events,
        timers,
        host_active,
        host_comm: crate::power::union(host_comm),
        offloads,
        mic_active,
        end,
        loop_total,
        host_compute: pos + vel + redist - inner,
        pci_total,
        mic_total,
    }
}

/// Power value with clamped Gaussian noise.
fn noisy(rng: &mut ChaCha8Rng, level: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return level;
    }
    (level + Normal::new(0.0, sigma).expect("sigma >= 0").sample(rng)).max(0.0)
}

#[derive(Default)]
struct StateAcc {
    sum: [f64; 2],
    count: [usize; 2],
}

impl StateAcc {
    fn add(&mut self, active: bool, w: f64) {
        self.sum[active as usize] += w;
        self.count[active as usize] += 1;
    }

    fn report(&self, device: Device, active: &[(f64, f64)], span: (f64, f64)) -> DeviceStateReport {
        let active_time: f64 = active.iter().map(|(a, b)| b.min(span.1) - a.max(span.0)).filter(|d| *d > 0.0).sum();
        let idle_time = span.1 - span.0 - active_time;
        let avg = |i: usize| if self.count[i] == 0 { 0.0 } else { self.sum[i] / self.count[i] as f64 };
        DeviceStateReport::from_states(device, (avg(0), self.count[0], idle_time), (avg(1), self.count[1], active_time))
    }
}

fn anchor(origin_wall: f64, global: f64, tfs: f64) -> TimeAnchor {
    TimeAnchor::new(WallClock::from_seconds_of_day(origin_wall + global), tfs)
}

/// Renders a scenario.
pub fn generate(s: &Scenario) -> Result<SynthRun, SynthError> {
    s.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let cfg = &s.config;
    let origin_wall = s
        .start_wall_s
        .unwrap_or_else(|| rng.gen_range(0.0..SECONDS_PER_DAY as f64))
        .rem_euclid(SECONDS_PER_DAY as f64);
    let sched = build_schedule(s, &mut rng);
    let ranks = cfg.ranks();
    let mics = cfg.mics_per_node;

    let mut offsets: BTreeMap<StreamId, f64> = BTreeMap::new();
    let mut pick = |id: StreamId, default: f64| {
        let v = s.offsets.get(&id.to_string()).copied().unwrap_or(default);
        offsets.insert(id, v);
        v
    };
    let mut files = BTreeMap::new();

    // application output, one timeline per rank with identical schedules
    let mut app_text = String::from("CoMD synthetic run\n");
    let mut app_offsets = Vec::with_capacity(ranks as usize);
    for r in 0..ranks {
        let off = pick(StreamId::App(r), -rng.gen_range(0.1..0.8));
        app_offsets.push(off);
        let tl = AppTimeline {
            rank: r,
            named_timers: sched.timers.clone(),
            event_anchors: sched
                .events
                .iter()
                .map(|(name, g)| {
                    let tfs = ms(g - off);
                    (name.clone(), anchor(origin_wall, off + tfs, tfs))
                })
                .collect(),
        };
        for line in format_app_timeline(&tl) {
            app_text.push_str(&line);
            app_text.push('\n');
        }
    }
    files.insert(trace::APP_OUT.to_string(), app_text);

    // offload report, records in completion order across ranks
    let names = &s.counter_names;
    let mut records = Vec::new();
    for (i, &(_, _, dm, dov)) in sched.offloads.iter().enumerate() {
        for r in 0..ranks {
            let instructions = (s.offload.vpu_instructions_per_s * dm).round() as u64;
            let counters = BTreeMap::from([
                (names.mic_llc_miss.clone(), (s.offload.mic_llc_miss_per_s * dm).round() as u64),
                (names.mic_unhalted.clone(), (cfg.mic_frequency_hz * dm).round() as u64),
                (names.mic_vpu_instructions.clone(), instructions),
                (names.mic_vpu_elements.clone(), (instructions as f64 * cfg.vector_intensity).round() as u64),
            ]);
            records.push(OffloadRecord {
                rank: r,
                device_id: r % mics,
                tag: i as u64,
                cpu_time_s: if s.offload.report_cpu_time { dm + dov } else { 0.0 },
                mic_time_s: dm,
                bytes_to_device: s.offload.bytes_to_device,
                bytes_from_device: s.offload.bytes_from_device,
                counters,
            });
        }
    }
    let mut rpt = String::new();
    for r in &records {
        for line in trace::offload::format_offload_record(r) {
            rpt.push_str(&line);
            rpt.push('\n');
        }
    }
    files.insert(trace::OFFLOAD_REPORT.to_string(), rpt);
    // what the parser will read back
    let parsed_records = trace::offload::parse_offload_report(&files[trace::OFFLOAD_REPORT]).expect("own report parses");

    let mut device_states = Vec::new();
    let mut windows = BTreeMap::new();
    let (mut comm_misses, mut comm_cycles) = (0u64, 0u64);
    let hc = &s.host_counters;
    for node in 0..cfg.nodes {
        // host sampler starts first, the device samplers after a remote-start delay
        let h_off = pick(StreamId::Host(node), -(s.pre_run_s + rng.gen_range(0.05..0.5)));
        let until = sched.end + s.post_run_s + rng.gen_range(0.05..0.3) - h_off;
        let times = sampler_times(&mut rng, s.host_period_s, until);
        let mut acc = StateAcc::default();
        let mut text = String::new();
        let mut prev = None;
        for &tfs in &times {
            let g = h_off + tfs;
            let active = contains(&sched.host_active, g);
            let w = noisy(&mut rng, if active { s.host_power.active_watts } else { s.host_power.idle_watts }, s.host_power.noise_sigma);
            let core = cents(0.8 * w);
            let dram = cents((w - core).max(0.0));
            let a = anchor(origin_wall, g, tfs);
            let power = HostPowerSample::new(a, core, dram);
            let dt = prev.map_or(s.host_period_s, |p| tfs - p);
            prev = Some(tfs);
            let comm = contains(&sched.host_comm, g);
            let rate = if comm { hc.comm_llc_miss_per_s } else { hc.other_llc_miss_per_s };
            let misses = (rate * dt).round() as i64;
            let cycles = (cfg.host_frequency_hz * hc.utilization * dt).round() as i64;
            if comm {
                comm_misses += misses as u64;
                comm_cycles += cycles as u64;
            }
            let perf = PerfSample {
                anchor: a,
                counters: BTreeMap::from([(names.host_llc_miss.clone(), misses), (names.host_unhalted.clone(), cycles)]),
            };
            acc.add(active, power.total_watts);
            text.push_str(&format_host_line(&power, &perf));
            text.push('\n');
        }
        let span = (h_off + times[0], h_off + *times.last().expect("non-empty"));
        let device = Device::Host { node };
        device_states.push(acc.report(device, &sched.host_active, span));
        windows.insert(device, compose_windows(span, sched.host_active.clone()));
        files.insert(trace::host_log_name(node), text);

        for d in 0..mics {
            let m_off = pick(StreamId::Mic(node, d), h_off + rng.gen_range(0.5..3.0));
            let until = sched.end + s.post_run_s - m_off;
            let times = sampler_times(&mut rng, s.mic_period_s, until);
            let mut acc = StateAcc::default();
            let mut text = String::new();
            for &tfs in &times {
                let g = m_off + tfs;
                let active = contains(&sched.mic_active, g);
                let w = noisy(&mut rng, if active { s.mic_power.active_watts } else { s.mic_power.idle_watts }, s.mic_power.noise_sigma);
                let pcie = cents(0.4 * w);
                let c2x3 = cents(0.33 * w);
                let c2x4 = cents((w - pcie - c2x3).max(0.0));
                let sample = MicPowerSample::new(anchor(origin_wall, g, tfs), pcie, c2x3, c2x4);
                acc.add(active, sample.total_watts);
                text.push_str(&format_mic_line(&sample));
                text.push('\n');
            }
            let span = (m_off + times[0], m_off + *times.last().expect("non-empty"));
            let device = Device::Mic { node, device: d };
            device_states.push(acc.report(device, &sched.mic_active, span));
            windows.insert(device, compose_windows(span, sched.mic_active.clone()));
            files.insert(trace::mic_log_name(node, d), text);
        }
    }

    let mic_misses = metrics::offload_counter_total(&parsed_records, &names.mic_llc_miss);
    let mic_cycles = metrics::offload_counter_total(&parsed_records, &names.mic_unhalted);
    let elements = metrics::offload_counter_total(&parsed_records, &names.mic_vpu_elements);
    let instructions = metrics::offload_counter_total(&parsed_records, &names.mic_vpu_instructions);
    let pci_bytes: u64 = parsed_records.iter().map(OffloadRecord::bytes_total).sum();
    let throughput = cfg.mic_cores as f64 * cfg.vector_intensity * cfg.ops_per_cycle * cfg.mic_frequency_hz;
    let total_energy_j = device_states.iter().map(|d| d.energy_j).sum();
    let truth = GroundTruth {
        seed: s.seed,
        config: cfg.clone(),
        origin_wall_s: origin_wall,
        offsets,
        phases: PhaseTimings {
            host_compute_s: sched.host_compute,
            halo_exchange_s: sched.timers["halo_exchange"],
            reduce_s: sched.timers["reduce"],
            mic_compute_s: sched.mic_total,
            pci_transfer_s: sched.pci_total,
            loop_total_s: sched.loop_total,
            pci_method: if s.offload.report_cpu_time { PciMethod::OffloadDifference } else { PciMethod::Residual },
        },
        app_span: (0.0, sched.end),
        windows: StateWindows { per_device: windows },
        device_states,
        host_comm_mem_bytes: comm_misses * 64,
        host_comm_bandwidth_bps: if comm_cycles == 0 { 0.0 } else { (comm_misses * 64) as f64 * cfg.host_frequency_hz / comm_cycles as f64 },
        mic_mem_bytes: mic_misses * 64,
        mic_bandwidth_bps: if mic_cycles == 0 { 0.0 } else { (mic_misses * 64) as f64 * cfg.mic_frequency_hz / mic_cycles as f64 },
        pci_bytes,
        pci_bandwidth_bps: if sched.pci_total == 0.0 { 0.0 } else { pci_bytes as f64 / (ranks as f64 * sched.pci_total) },
        measured_vector_intensity: if instructions == 0 { 0.0 } else { elements as f64 / instructions as f64 },
        throughput_flops: throughput,
        work_flop: throughput * ranks as f64 * sched.mic_total,
        total_energy_j,
    };
    Ok(SynthRun { files, truth })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> Scenario {
        Scenario {
            seed,
            iterations: 3,
            pre_run_s: 12.0,
            post_run_s: 5.0,
            ..Scenario::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate(&small(3)).unwrap();
        let b = generate(&small(3)).unwrap();
        assert_eq!(a, b);
        let c = generate(&small(4)).unwrap();
        assert_ne!(a.files, c.files);
    }

    #[test]
    fn four_artifacts_that_parse() {
        let run = generate(&small(1)).unwrap();
        assert_eq!(
            run.files.keys().cloned().collect::<Vec<_>>(),
            ["app.out", "host-0.log", "mic-0-0.log", "offload.rpt"]
        );
        trace::host::parse_host_sampler(&run.files["host-0.log"]).unwrap();
        trace::mic::parse_mic_sampler(&run.files["mic-0-0.log"]).unwrap();
        let apps = trace::app::parse_app_output(&run.files["app.out"]).unwrap();
        assert_eq!(apps.len(), 1);
        let recs = trace::offload::parse_offload_report(&run.files["offload.rpt"]).unwrap();
        assert_eq!(recs.len(), 3);
    }

    #[test]
    fn mic_busy_time_is_preserved() {
        // loop of about 120 s with 70 s of device compute
        let s = Scenario {
            iterations: 14,
            phases: PhaseSchedule {
                position_s: 3.4,
                ..PhaseSchedule::default()
            },
            offload: OffloadSeries {
                mic_time_s: 5.0,
                ..OffloadSeries::default()
            },
            ..small(9)
        };
        let run = generate(&s).unwrap();
        let recs = trace::offload::parse_offload_report(&run.files["offload.rpt"]).unwrap();
        let total: f64 = recs.iter().map(|r| r.mic_time_s).sum();
        assert!((total - 70.0).abs() < 1e-4, "{total}");
        assert!((run.truth.phases.loop_total_s - 121.0).abs() < 5.0);
    }

    #[test]
    fn noise_mean_within_standard_error() {
        // sigma 2 W over a 150 W plateau: 400 samples put the mean within 3 * 2 / 20
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mean = (0..400).map(|_| noisy(&mut rng, 150.0, 2.0)).sum::<f64>() / 400.0;
        assert!((mean - 150.0).abs() <= 0.3);
    }

    #[test]
    fn noiseless_levels_are_exact() {
        let mut s = small(2);
        s.host_power.noise_sigma = 0.0;
        s.mic_power.noise_sigma = 0.0;
        let run = generate(&s).unwrap();
        for d in &run.truth.device_states {
            let (idle, active) = match d.device {
                Device::Host { .. } => (60.0, 160.0),
                Device::Mic { .. } => (100.0, 190.0),
            };
            assert!((d.idle_watts_avg - idle).abs() < 1e-9);
            assert!((d.active_watts_avg - active).abs() < 1e-9);
        }
    }

    #[test]
    fn infeasible_force_phase() {
        let mut s = small(1);
        s.phases.force_s = Some(0.1);
        assert!(matches!(generate(&s), Err(SynthError::Infeasible(m)) if m.contains("longer than force phase")));
        s.phases.force_s = Some(1.0);
        generate(&s).unwrap();
    }

    #[test]
    fn scenario_toml_round_trip() {
        let s = Scenario {
            offsets: BTreeMap::from([("host-0".to_string(), -21.0)]),
            ..small(5)
        };
        let back = Scenario::from_toml_str(&s.to_toml_string()).unwrap();
        assert_eq!(back, s);
        let partial = Scenario::from_toml_str("seed = 4\niterations = 2\n[config]\nnodes = 2\n").unwrap();
        assert_eq!((partial.seed, partial.iterations, partial.config.nodes), (4, 2, 2));
        assert_eq!(partial.config.mic_cores, 60);
        assert!(Scenario::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn declared_offsets_are_used() {
        let s = Scenario {
            offsets: BTreeMap::from([("host-0".to_string(), -20.0), ("mic-0-0".to_string(), -17.3)]),
            ..small(6)
        };
        let run = generate(&s).unwrap();
        assert_eq!(run.truth.offsets[&StreamId::Host(0)], -20.0);
        assert_eq!(run.truth.offsets[&StreamId::Mic(0, 0)], -17.3);
    }
}
