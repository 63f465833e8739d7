//! Domain values shared by the parsers, profilers and the orchestrator.
//!
//! Every type exposes its fields so that callers (and property tests) can
//! build arbitrary values; [`Validate`] reports which invariants a value
//! breaks. Checked constructors (`new`/`try_new`) only hand out valid values.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Local time of day at one-second resolution, as printed in `[HH:MM:SS]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WallClock {
    pub hours: u8,
    pub minutes: u8,
    pub seconds: u8,
}

impl WallClock {
    pub fn new(hours: u8, minutes: u8, seconds: u8) -> Option<Self> {
        (hours < 24 && minutes < 60 && seconds < 60).then_some(Self {
            hours,
            minutes,
            seconds,
        })
    }

    /// Builds from a (possibly fractional, possibly out of range) seconds-of-day
    /// value. The fraction is dropped (floor) and the result wraps at midnight.
    pub fn from_seconds_of_day(secs: f64) -> Self {
        let whole = secs.floor() as i64;
        let s = whole.rem_euclid(SECONDS_PER_DAY);
        Self {
            hours: (s / 3600) as u8,
            minutes: ((s / 60) % 60) as u8,
            seconds: (s % 60) as u8,
        }
    }

    pub fn seconds_of_day(&self) -> i64 {
        self.hours as i64 * 3600 + self.minutes as i64 * 60 + self.seconds as i64
    }

    /// Difference `self - earlier` in seconds, folded into `[-12h, 12h)`.
    pub fn diff_wrapped(&self, earlier: &WallClock) -> i64 {
        wrap_half_day(self.seconds_of_day() - earlier.seconds_of_day())
    }
}

/// Folds a seconds difference into `[-43200, 43200)`.
pub fn wrap_half_day(diff: i64) -> i64 {
    (diff + SECONDS_PER_DAY / 2).rem_euclid(SECONDS_PER_DAY) - SECONDS_PER_DAY / 2
}

impl fmt::Display for WallClock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}:{:02}:{:02}", self.hours, self.minutes, self.seconds)
    }
}

/// Wall-clock stamp plus time-from-start (TFS) of one sample or event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeAnchor {
    pub wall_clock: WallClock,
    /// Seconds since the emitting stream started, millisecond precision.
    pub tfs: f64,
}

impl TimeAnchor {
    pub fn new(wall_clock: WallClock, tfs: f64) -> Self {
        Self { wall_clock, tfs }
    }
}

/// A single rule a value failed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Invariant checking. Violations are data; an empty list means ok.
pub trait Validate {
    fn validate(&self) -> Vec<Violation>;

    fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }
}

fn check(out: &mut Vec<Violation>, ok: bool, field: &str, rule: &str) {
    if !ok {
        out.push(Violation::new(field, rule));
    }
}

fn non_negative(v: f64) -> bool {
    v.is_finite() && v >= 0.0
}

impl Validate for TimeAnchor {
    fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        check(&mut v, non_negative(self.tfs), "tfs", "tfs >= 0");
        check(
            &mut v,
            WallClock::new(
                self.wall_clock.hours,
                self.wall_clock.minutes,
                self.wall_clock.seconds,
            )
            .is_some(),
            "wall_clock",
            "HH < 24, MM < 60, SS < 60",
        );
        v
    }
}

/// Checks the per-stream anchor rules: strictly increasing TFS, and the
/// wall-clock difference (mod 24h) agreeing with the TFS difference to within
/// the 1 s wall-clock resolution plus `tolerance_s`.
pub fn validate_anchor_stream<'a, I>(anchors: I, tolerance_s: f64) -> Vec<Violation>
where
    I: IntoIterator<Item = &'a TimeAnchor>,
{
    anchor_stream_violations(anchors, tolerance_s, true)
}

/// As [`validate_anchor_stream`], but for event streams, where coincident
/// events may share a TFS value.
pub fn validate_event_stream<'a, I>(anchors: I, tolerance_s: f64) -> Vec<Violation>
where
    I: IntoIterator<Item = &'a TimeAnchor>,
{
    anchor_stream_violations(anchors, tolerance_s, false)
}

fn anchor_stream_violations<'a, I>(anchors: I, tolerance_s: f64, strict: bool) -> Vec<Violation>
where
    I: IntoIterator<Item = &'a TimeAnchor>,
{
    let mut out = Vec::new();
    let mut first: Option<&TimeAnchor> = None;
    let mut prev: Option<&TimeAnchor> = None;
    for (i, a) in anchors.into_iter().enumerate() {
        for mut viol in a.validate() {
            viol.field = format!("anchors[{i}].{}", viol.field);
            out.push(viol);
        }
        if let Some(p) = prev {
            if a.tfs < p.tfs || (strict && a.tfs == p.tfs) {
                let rule = if strict { "strictly increasing" } else { "non-decreasing" };
                out.push(Violation::new(
                    format!("anchors[{i}].tfs"),
                    format!("tfs {rule} ({:.3} after {:.3})", a.tfs, p.tfs),
                ));
            }
        }
        if let Some(f) = first {
            let dt = a.tfs - f.tfs;
            // unwrap whole days against the tfs difference
            let residual = wrap_half_day(a.wall_clock.diff_wrapped(&f.wall_clock) - dt.round() as i64);
            let wall_dt = dt.round() + residual as f64;
            if (wall_dt - dt).abs() > 1.0 + tolerance_s {
                out.push(Violation::new(
                    format!("anchors[{i}].wall_clock"),
                    format!(
                        "wall-clock and tfs differences agree within 1 s + {tolerance_s} s (wall {wall_dt:.0} s, tfs {dt:.3} s)"
                    ),
                ));
            }
        }
        first.get_or_insert(a);
        prev = Some(a);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostPowerSample {
    pub anchor: TimeAnchor,
    pub core_watts: f64,
    pub dram_watts: f64,
    /// Core + DRAM; uncore is not part of host power.
    pub total_watts: f64,
}

impl HostPowerSample {
    pub fn new(anchor: TimeAnchor, core_watts: f64, dram_watts: f64) -> Self {
        Self {
            anchor,
            core_watts,
            dram_watts,
            total_watts: core_watts + dram_watts,
        }
    }
}

impl Validate for HostPowerSample {
    fn validate(&self) -> Vec<Violation> {
        let mut v = self.anchor.validate();
        check(&mut v, non_negative(self.core_watts), "core_watts", "watts >= 0");
        check(&mut v, non_negative(self.dram_watts), "dram_watts", "watts >= 0");
        check(
            &mut v,
            self.total_watts == self.core_watts + self.dram_watts,
            "total_watts",
            "total = core + dram",
        );
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicPowerSample {
    pub anchor: TimeAnchor,
    pub pcie_watts: f64,
    pub c2x3_watts: f64,
    pub c2x4_watts: f64,
    /// Sum of the three connectors.
    pub total_watts: f64,
    /// Window-averaged readings from the power file; stored, never used for
    /// attribution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window0_watts: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window1_watts: Option<f64>,
}

impl MicPowerSample {
    pub fn new(anchor: TimeAnchor, pcie_watts: f64, c2x3_watts: f64, c2x4_watts: f64) -> Self {
        Self {
            anchor,
            pcie_watts,
            c2x3_watts,
            c2x4_watts,
            total_watts: pcie_watts + c2x3_watts + c2x4_watts,
            window0_watts: None,
            window1_watts: None,
        }
    }
}

impl Validate for MicPowerSample {
    fn validate(&self) -> Vec<Violation> {
        let mut v = self.anchor.validate();
        check(&mut v, non_negative(self.pcie_watts), "pcie_watts", "watts >= 0");
        check(&mut v, non_negative(self.c2x3_watts), "c2x3_watts", "watts >= 0");
        check(&mut v, non_negative(self.c2x4_watts), "c2x4_watts", "watts >= 0");
        check(
            &mut v,
            self.total_watts == self.pcie_watts + self.c2x3_watts + self.c2x4_watts,
            "total_watts",
            "total = pcie + c2x3 + c2x4",
        );
        v
    }
}

/// Counter deltas accumulated since the previous sample. Counter names are
/// opaque configuration strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfSample {
    pub anchor: TimeAnchor,
    pub counters: BTreeMap<String, i64>,
}

impl PerfSample {
    pub fn counter(&self, name: &str) -> u64 {
        self.counters.get(name).copied().unwrap_or(0).max(0) as u64
    }
}

impl Validate for PerfSample {
    fn validate(&self) -> Vec<Violation> {
        let mut v = self.anchor.validate();
        for (name, delta) in &self.counters {
            check(&mut v, *delta >= 0, &format!("counters.{name}"), "delta >= 0");
        }
        v
    }
}

/// One offload section as reported by the offload runtime (report level 2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffloadRecord {
    pub rank: u32,
    pub device_id: u32,
    pub tag: u64,
    /// Host-side time around the offload; `0.0` means the runtime did not
    /// report it.
    pub cpu_time_s: f64,
    pub mic_time_s: f64,
    pub bytes_to_device: u64,
    pub bytes_from_device: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub counters: BTreeMap<String, u64>,
}

impl OffloadRecord {
    pub fn cpu_time_defined(&self) -> bool {
        self.cpu_time_s > 0.0
    }

    pub fn bytes_total(&self) -> u64 {
        self.bytes_to_device + self.bytes_from_device
    }
}

impl Validate for OffloadRecord {
    fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        check(&mut v, non_negative(self.cpu_time_s), "cpu_time_s", "seconds >= 0");
        check(&mut v, non_negative(self.mic_time_s), "mic_time_s", "seconds >= 0");
        if self.cpu_time_s > 0.0 {
            check(
                &mut v,
                self.cpu_time_s >= self.mic_time_s,
                "cpu_time_s",
                "cpu_time >= mic_time when defined",
            );
        }
        v
    }
}

/// Timer names every application timeline must carry.
pub const REQUIRED_TIMERS: [&str; 8] = [
    "position",
    "velocity",
    "redistribute",
    "force",
    "halo_exchange",
    "reduce",
    "inner_transfer",
    "loop",
];

/// Application-reported timers and phase-boundary events for one rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppTimeline {
    pub rank: u32,
    pub named_timers: BTreeMap<String, f64>,
    pub event_anchors: Vec<(String, TimeAnchor)>,
}

impl AppTimeline {
    pub fn timer(&self, name: &str) -> Option<f64> {
        self.named_timers.get(name).copied()
    }
}

impl Validate for AppTimeline {
    fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        for name in REQUIRED_TIMERS {
            check(
                &mut v,
                self.named_timers.contains_key(name),
                &format!("named_timers.{name}"),
                "required timer present",
            );
        }
        for (name, val) in &self.named_timers {
            check(&mut v, non_negative(*val), &format!("named_timers.{name}"), "seconds >= 0");
        }
        if let Some(lp) = self.timer("loop") {
            for name in ["position", "velocity", "redistribute", "force", "halo_exchange", "reduce", "inner_transfer"] {
                if let Some(t) = self.timer(name) {
                    check(&mut v, lp >= t, &format!("named_timers.{name}"), "loop >= each constituent timer");
                }
            }
        }
        for (i, (_, a)) in self.event_anchors.iter().enumerate() {
            for mut viol in a.validate() {
                viol.field = format!("event_anchors[{i}].{}", viol.field);
                v.push(viol);
            }
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    /// Upper bound on vectorization intensity for the 512-bit vector unit.
    pub fn max_vector_intensity(self) -> f64 {
        match self {
            Precision::Single => 16.0,
            Precision::Double => 8.0,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Single => "single",
            Precision::Double => "double",
        })
    }
}

pub const DEFAULT_VECTOR_INTENSITY: f64 = 2.6;
pub const DEFAULT_OPS_PER_CYCLE: f64 = 1.15;

/// The six experiment parameters plus the accelerator calibration values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub system_name: String,
    pub nodes: u32,
    pub mics_per_node: u32,
    pub problem_size: u32,
    pub host_frequency_hz: f64,
    pub mic_cores: u32,
    pub mic_frequency_hz: f64,
    pub vector_intensity: f64,
    pub ops_per_cycle: f64,
    pub precision: Precision,
}

impl RunConfig {
    /// Number of MPI ranks: one per accelerator, or one per node without any.
    pub fn ranks(&self) -> u32 {
        self.nodes * self.mics_per_node.max(1)
    }

    /// Block distribution of ranks onto nodes.
    pub fn node_of_rank(&self, rank: u32) -> u32 {
        rank / self.mics_per_node.max(1)
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            system_name: "borges".into(),
            nodes: 1,
            mics_per_node: 1,
            problem_size: 50,
            host_frequency_hz: 2.6e9,
            mic_cores: 60,
            mic_frequency_hz: 1.1e9,
            vector_intensity: DEFAULT_VECTOR_INTENSITY,
            ops_per_cycle: DEFAULT_OPS_PER_CYCLE,
            precision: Precision::Double,
        }
    }
}

impl Validate for RunConfig {
    fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        check(&mut v, !self.system_name.is_empty(), "system_name", "non-empty");
        check(&mut v, self.nodes >= 1, "nodes", "nodes >= 1");
        check(&mut v, self.problem_size >= 1, "problem_size", "problem_size >= 1");
        check(&mut v, self.mic_cores >= 1, "mic_cores", "mic_cores >= 1");
        check(
            &mut v,
            self.host_frequency_hz.is_finite() && self.host_frequency_hz > 0.0,
            "host_frequency_hz",
            "Hz > 0",
        );
        check(
            &mut v,
            self.mic_frequency_hz.is_finite() && self.mic_frequency_hz > 0.0,
            "mic_frequency_hz",
            "Hz > 0",
        );
        check(
            &mut v,
            self.ops_per_cycle.is_finite() && self.ops_per_cycle > 0.0,
            "ops_per_cycle",
            "ops_per_cycle > 0",
        );
        let max = self.precision.max_vector_intensity();
        let vi = self.vector_intensity;
        check(
            &mut v,
            (1.0..=max).contains(&vi),
            "vector_intensity",
            &format!("VI in [1,{max}] for {}", self.precision),
        );
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PciMethod {
    /// Sum of offload CPU times minus sum of MIC times.
    OffloadDifference,
    /// Loop time minus every other attributed phase.
    Residual,
}

impl fmt::Display for PciMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PciMethod::OffloadDifference => "offload_difference",
            PciMethod::Residual => "residual",
        })
    }
}

/// Fraction of loop time allowed to remain unattributed.
pub const PHASE_SLACK: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub host_compute_s: f64,
    pub halo_exchange_s: f64,
    pub reduce_s: f64,
    pub mic_compute_s: f64,
    pub pci_transfer_s: f64,
    pub loop_total_s: f64,
    pub pci_method: PciMethod,
}

impl PhaseTimings {
    pub fn attributed_s(&self) -> f64 {
        self.host_compute_s + self.halo_exchange_s + self.reduce_s + self.mic_compute_s + self.pci_transfer_s
    }
}

impl Validate for PhaseTimings {
    fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        for (name, val) in [
            ("host_compute_s", self.host_compute_s),
            ("halo_exchange_s", self.halo_exchange_s),
            ("reduce_s", self.reduce_s),
            ("mic_compute_s", self.mic_compute_s),
            ("pci_transfer_s", self.pci_transfer_s),
            ("loop_total_s", self.loop_total_s),
        ] {
            check(&mut v, non_negative(val), name, "seconds >= 0");
        }
        check(
            &mut v,
            self.attributed_s() <= self.loop_total_s * (1.0 + PHASE_SLACK),
            "loop_total_s",
            "sum of phases <= loop * 1.02",
        );
        v
    }
}

/// Serialized as its display name, `host-N` or `mic-N-D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Device {
    Host { node: u32 },
    Mic { node: u32, device: u32 },
}

impl fmt::Display for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Device::Host { node } => write!(f, "host-{node}"),
            Device::Mic { node, device } => write!(f, "mic-{node}-{device}"),
        }
    }
}

impl std::str::FromStr for Device {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("unknown device `{s}`");
        if let Some(n) = s.strip_prefix("host-") {
            return n.parse().map(|node| Device::Host { node }).map_err(|_| bad());
        }
        let (n, d) = s.strip_prefix("mic-").and_then(|r| r.split_once('-')).ok_or_else(bad)?;
        Ok(Device::Mic {
            node: n.parse().map_err(|_| bad())?,
            device: d.parse().map_err(|_| bad())?,
        })
    }
}

impl From<Device> for String {
    fn from(d: Device) -> String {
        d.to_string()
    }
}

impl TryFrom<String> for Device {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Minimum sample count per state before a report is considered trustworthy.
pub const MIN_STATE_SAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceStateReport {
    pub device: Device,
    pub idle_watts_avg: f64,
    pub active_watts_avg: f64,
    pub idle_samples: usize,
    pub active_samples: usize,
    pub idle_time_s: f64,
    pub active_time_s: f64,
    pub energy_j: f64,
    /// Set when either state has fewer than [`MIN_STATE_SAMPLES`] samples.
    pub low_sample_warning: bool,
}

impl DeviceStateReport {
    pub fn from_states(
        device: Device,
        (idle_watts_avg, idle_samples, idle_time_s): (f64, usize, f64),
        (active_watts_avg, active_samples, active_time_s): (f64, usize, f64),
    ) -> Self {
        Self {
            device,
            idle_watts_avg,
            active_watts_avg,
            idle_samples,
            active_samples,
            idle_time_s,
            active_time_s,
            energy_j: idle_watts_avg * idle_time_s + active_watts_avg * active_time_s,
            low_sample_warning: idle_samples < MIN_STATE_SAMPLES || active_samples < MIN_STATE_SAMPLES,
        }
    }
}

impl Validate for DeviceStateReport {
    fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let expected = self.idle_watts_avg * self.idle_time_s + self.active_watts_avg * self.active_time_s;
        check(
            &mut v,
            (self.energy_j - expected).abs() <= 1e-9 * expected.abs().max(1.0),
            "energy_j",
            "energy = idle avg * idle time + active avg * active time",
        );
        check(
            &mut v,
            self.low_sample_warning
                == (self.idle_samples < MIN_STATE_SAMPLES || self.active_samples < MIN_STATE_SAMPLES),
            "low_sample_warning",
            "warning set iff a state has < 100 samples",
        );
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub phases: PhaseTimings,
    pub device_states: Vec<DeviceStateReport>,
    pub mic_mem_bytes: u64,
    pub host_comm_mem_bytes: u64,
    pub pci_mem_bytes: u64,
    pub mic_bandwidth_bps: f64,
    pub host_comm_bandwidth_bps: f64,
    pub pci_bandwidth_bps: f64,
    pub throughput_flops: f64,
    pub work_flop: f64,
    pub total_energy_j: f64,
}

impl Validate for RunReport {
    fn validate(&self) -> Vec<Violation> {
        let mut v = self.config.validate();
        v.extend(self.phases.validate());
        for d in &self.device_states {
            v.extend(d.validate());
        }
        let sum: f64 = self.device_states.iter().map(|d| d.energy_j).sum();
        check(
            &mut v,
            (self.total_energy_j - sum).abs() <= 1e-9 * sum.abs().max(1.0),
            "total_energy_j",
            "total energy = sum of device energies",
        );
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn anchor(tfs: f64) -> TimeAnchor {
        TimeAnchor::new(WallClock::new(13, 5, 2).unwrap(), tfs)
    }

    #[test]
    fn mic_sample_connector_sum_is_valid() {
        let s = MicPowerSample {
            anchor: anchor(1.0),
            pcie_watts: 50.0,
            c2x3_watts: 40.0,
            c2x4_watts: 30.0,
            total_watts: 120.0,
            window0_watts: None,
            window1_watts: None,
        };
        assert!(s.validate().is_empty());
    }

    #[test]
    fn double_precision_vi_above_eight_is_flagged() {
        let cfg = RunConfig {
            vector_intensity: 9.0,
            ..RunConfig::default()
        };
        let v = cfg.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "vector_intensity");
        assert_eq!(v[0].rule, "VI in [1,8] for double");
    }

    #[test]
    fn cpu_time_shorter_than_mic_time_is_flagged() {
        let r = OffloadRecord {
            rank: 0,
            device_id: 0,
            tag: 1,
            cpu_time_s: 0.05,
            mic_time_s: 0.09,
            bytes_to_device: 0,
            bytes_from_device: 0,
            counters: BTreeMap::new(),
        };
        let v = r.validate();
        assert_eq!(v, vec![Violation::new("cpu_time_s", "cpu_time >= mic_time when defined")]);
        let undefined = OffloadRecord { cpu_time_s: 0.0, ..r };
        assert!(undefined.is_valid());
    }

    #[test]
    fn wall_clock_wraps_at_midnight() {
        let before = WallClock::new(23, 59, 58).unwrap();
        let after = WallClock::new(0, 0, 3).unwrap();
        assert_eq!(after.diff_wrapped(&before), 5);
        assert_eq!(before.diff_wrapped(&after), -5);
        assert_eq!(WallClock::from_seconds_of_day(86_400.7), WallClock::new(0, 0, 0).unwrap());
        assert_eq!(WallClock::from_seconds_of_day(-0.5), WallClock::new(23, 59, 59).unwrap());
    }

    #[test]
    fn anchor_stream_rules() {
        let w = |s| WallClock::from_seconds_of_day(47_000.0 + s);
        let good = [TimeAnchor::new(w(0.0), 0.0), TimeAnchor::new(w(1.2), 1.2), TimeAnchor::new(w(5.9), 5.9)];
        assert!(validate_anchor_stream(&good, 0.02).is_empty());

        let backwards = [TimeAnchor::new(w(0.0), 5.0), TimeAnchor::new(w(0.0), 4.99)];
        let v = validate_anchor_stream(&backwards, 0.02);
        assert_eq!(v.len(), 1);
        assert!(v[0].rule.starts_with("tfs strictly increasing"));

        let drifted = [TimeAnchor::new(w(0.0), 0.0), TimeAnchor::new(w(7.0), 3.0)];
        assert_eq!(validate_anchor_stream(&drifted, 0.02).len(), 1);

        let tied = [TimeAnchor::new(w(1.0), 1.0), TimeAnchor::new(w(1.0), 1.0)];
        assert_eq!(validate_anchor_stream(&tied, 0.02).len(), 1);
        assert!(validate_event_stream(&tied, 0.02).is_empty());
        assert_eq!(validate_event_stream(&backwards, 0.02).len(), 1);
    }

    #[test]
    fn anchor_stream_across_midnight() {
        let w = |s: f64| WallClock::from_seconds_of_day(86_398.5 + s);
        let a: Vec<_> = (0..10).map(|i| TimeAnchor::new(w(i as f64 * 0.7), i as f64 * 0.7)).collect();
        assert!(validate_anchor_stream(&a, 0.02).is_empty());
    }

    #[test]
    fn phase_slack_is_two_percent() {
        let p = PhaseTimings {
            host_compute_s: 50.0,
            halo_exchange_s: 10.0,
            reduce_s: 1.0,
            mic_compute_s: 40.0,
            pci_transfer_s: 1.0,
            loop_total_s: 100.0,
            pci_method: PciMethod::OffloadDifference,
        };
        assert!(p.is_valid());
        let over = PhaseTimings { pci_transfer_s: 1.1, ..p };
        assert_eq!(over.validate().len(), 1);
    }

    #[test]
    fn device_report_energy_and_warning() {
        let r = DeviceStateReport::from_states(
            Device::Host { node: 0 },
            (40.0, 100, 10.0),
            (150.0, 99, 20.0),
        );
        assert_eq!(r.energy_j, 3400.0);
        assert!(r.low_sample_warning);
        assert!(r.is_valid());
    }

    #[test]
    fn rank_to_node_is_block_distributed() {
        let cfg = RunConfig {
            nodes: 3,
            mics_per_node: 2,
            ..RunConfig::default()
        };
        assert_eq!(cfg.ranks(), 6);
        assert_eq!((0..6).map(|r| cfg.node_of_rank(r)).collect::<Vec<_>>(), vec![0, 0, 1, 1, 2, 2]);
    }
}
