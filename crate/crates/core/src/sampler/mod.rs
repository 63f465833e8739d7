//! Host and MIC sampler streams.
//!
//! Every sampler is single-threaded and writes one grammar-conformant line
//! per period to its own file, flushing each line. Replay samplers re-emit a
//! recorded trace on schedule with fresh anchors; the live host sampler reads
//! the power-capping energy counters and, optionally, hardware counters.

pub mod clock;
pub mod counters;
pub mod powercap;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use clock::{Clock, RealClock, ScaledClock};

use crate::model::{HostPowerSample, MicPowerSample, PerfSample, TimeAnchor, WallClock};
use crate::trace::host::{format_host_line, parse_host_sampler};
use crate::trace::mic::{format_mic_line, parse_mic_sampler};
use crate::trace::ParseError;

pub const DEFAULT_HOST_PERIOD_S: f64 = 0.010;
pub const DEFAULT_MIC_PERIOD_S: f64 = 0.050;
/// The device power file only updates this often.
pub const MIN_MIC_PERIOD_S: f64 = 0.050;
pub const PERIOD_ENV: &str = "PHIPROF_SAMPLER_PERIOD_MS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    HostLive,
    HostReplay,
    MicReplay,
}

impl SamplerKind {
    pub fn is_mic(self) -> bool {
        matches!(self, SamplerKind::MicReplay)
    }

    pub fn default_period_s(self) -> f64 {
        if self.is_mic() {
            DEFAULT_MIC_PERIOD_S
        } else {
            DEFAULT_HOST_PERIOD_S
        }
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "host_live" => Ok(SamplerKind::HostLive),
            "host_replay" => Ok(SamplerKind::HostReplay),
            "mic_replay" => Ok(SamplerKind::MicReplay),
            _ => Err(format!("unknown sampler kind `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub period_s: f64,
    pub output_path: PathBuf,
    pub source_path: Option<PathBuf>,
    /// Hardware counters for host kinds.
    #[serde(default)]
    pub counter_names: Vec<String>,
    /// Root of the power-capping interface for the live sampler.
    #[serde(default)]
    pub powercap_root: Option<PathBuf>,
    /// Clock time that counts as elapsed zero; defaults to when the
    /// sampler has opened its source and output.
    #[serde(default)]
    pub start_at: Option<f64>,
}

impl SamplerSpec {
    pub fn new(kind: SamplerKind, output_path: impl Into<PathBuf>) -> Self {
        Self {
            kind,
            period_s: kind.default_period_s(),
            output_path: output_path.into(),
            source_path: None,
            counter_names: Vec::new(),
            powercap_root: None,
            start_at: None,
        }
    }

    pub fn replay(kind: SamplerKind, source: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        Self {
            source_path: Some(source.into()),
            ..Self::new(kind, output)
        }
    }

    /// Applies the period override from the environment, if set.
    pub fn with_env_period(mut self) -> Result<Self, SamplerError> {
        if let Ok(v) = std::env::var(PERIOD_ENV) {
            let ms: f64 = v
                .trim()
                .parse()
                .map_err(|_| SamplerError::InvalidPeriod(format!("{PERIOD_ENV}={v} is not a number")))?;
            self.period_s = ms / 1000.0;
        }
        Ok(self)
    }

    pub fn check(&self) -> Result<(), SamplerError> {
        if !(self.period_s.is_finite() && self.period_s > 0.0) {
            return Err(SamplerError::InvalidPeriod(format!("period {} s must be > 0", self.period_s)));
        }
        if self.kind.is_mic() && self.period_s < MIN_MIC_PERIOD_S {
            return Err(SamplerError::InvalidPeriod(format!(
                "MIC period {:.3} s is below the {MIN_MIC_PERIOD_S:.3} s update interval of the power file",
                self.period_s
            )));
        }
        if self.kind != SamplerKind::HostLive && self.source_path.is_none() {
            return Err(SamplerError::MissingSource);
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid period: {0}")]
    InvalidPeriod(String),
    #[error("replay sampler needs a source file")]
    MissingSource,
    #[error("{}: {source}", path.display())]
    Source {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    SourceFormat {
        path: PathBuf,
        #[source]
        source: ParseError,
    },
    #[error("replay source {} is empty", .0.display())]
    EmptySource(PathBuf),
    #[error("{}: {source}", path.display())]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("energy interface: {0}")]
    EnergyInterface(String),
    #[error("hardware counters: {0}")]
    Counters(String),
}

/// Coordinator-to-sampler stop flag.
#[derive(Debug, Clone, Default)]
pub struct StopSignal(Arc<AtomicBool>);

impl StopSignal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stop(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_stopped(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

/// Counts live sampler tasks; a guard is held for the lifetime of each.
#[derive(Debug, Clone, Default)]
pub struct SamplerRegistry(Arc<AtomicUsize>);

#[derive(Debug)]
pub struct SamplerGuard(Arc<AtomicUsize>);

impl SamplerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enter(&self) -> SamplerGuard {
        self.0.fetch_add(1, Ordering::SeqCst);
        SamplerGuard(self.0.clone())
    }

    pub fn live(&self) -> usize {
        self.0.load(Ordering::SeqCst)
    }
}

impl Drop for SamplerGuard {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

enum Source {
    Host(Vec<(HostPowerSample, PerfSample)>),
    Mic(Vec<MicPowerSample>),
    Live {
        powercap: powercap::Powercap,
        counters: Option<counters::PackageCounters>,
    },
}

impl Source {
    fn open(spec: &SamplerSpec) -> Result<(Self, Option<String>), SamplerError> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|source| SamplerError::Source {
                path: p.to_path_buf(),
                source,
            })
        };
        let fmt = |p: &Path| {
            let path = p.to_path_buf();
            move |source| SamplerError::SourceFormat { path, source }
        };
        match spec.kind {
            SamplerKind::HostReplay => {
                let p = spec.source_path.as_deref().ok_or(SamplerError::MissingSource)?;
                let v = parse_host_sampler(&read(p)?).map_err(fmt(p))?;
                if v.is_empty() {
                    return Err(SamplerError::EmptySource(p.to_path_buf()));
                }
                Ok((Source::Host(v), None))
            }
            SamplerKind::MicReplay => {
                let p = spec.source_path.as_deref().ok_or(SamplerError::MissingSource)?;
                let v = parse_mic_sampler(&read(p)?).map_err(fmt(p))?;
                if v.is_empty() {
                    return Err(SamplerError::EmptySource(p.to_path_buf()));
                }
                Ok((Source::Mic(v), None))
            }
            SamplerKind::HostLive => {
                let root = spec
                    .powercap_root
                    .clone()
                    .unwrap_or_else(|| PathBuf::from(powercap::DEFAULT_POWERCAP_ROOT));
                let powercap = powercap::Powercap::open(&root)?;
                let counters = if spec.counter_names.is_empty() {
                    None
                } else {
                    Some(counters::PackageCounters::open(&spec.counter_names)?)
                };
                let header = format!(
                    "# phiprof host_live core_domain={} dram={} counters={}",
                    if powercap.core_is_package { "package" } else { "core" },
                    if powercap.has_dram() { "yes" } else { "absent" },
                    if counters.is_some() { "package-aggregate" } else { "none" },
                );
                Ok((Source::Live { powercap, counters }, Some(header)))
            }
        }
    }

    fn source_tfs(&self, i: usize) -> f64 {
        match self {
            Source::Host(v) => v[i].0.anchor.tfs,
            Source::Mic(v) => v[i].anchor.tfs,
            Source::Live { .. } => 0.0,
        }
    }

    fn len(&self) -> usize {
        match self {
            Source::Host(v) => v.len(),
            Source::Mic(v) => v.len(),
            Source::Live { .. } => usize::MAX,
        }
    }

    /// Renders the sample for `elapsed` seconds since sampler start, or
    /// `None` once a replay source is exhausted.
    fn line(&mut self, cursor: &mut usize, anchor: TimeAnchor, dt: f64) -> Result<Option<String>, SamplerError> {
        if let Source::Live { powercap, counters } = self {
            let (core, dram) = powercap.read_watts(dt)?;
            let counters = match counters {
                Some(c) => c.deltas()?.into_iter().collect(),
                None => BTreeMap::new(),
            };
            let power = HostPowerSample::new(anchor, (core * 100.0).round() / 100.0, (dram * 100.0).round() / 100.0);
            return Ok(Some(format_host_line(&power, &PerfSample { anchor, counters })));
        }
        let n = self.len();
        if self.source_tfs(n - 1) < anchor.tfs - 1e-9 && *cursor + 1 >= n {
            return Ok(None);
        }
        while *cursor + 1 < n && self.source_tfs(*cursor + 1) <= anchor.tfs {
            *cursor += 1;
        }
        Ok(Some(match self {
            Source::Host(v) => {
                let (p, perf) = &v[*cursor];
                let power = HostPowerSample { anchor, ..p.clone() };
                format_host_line(
                    &power,
                    &PerfSample {
                        anchor,
                        counters: perf.counters.clone(),
                    },
                )
            }
            Source::Mic(v) => format_mic_line(&MicPowerSample { anchor, ..v[*cursor].clone() }),
            Source::Live { .. } => unreachable!(),
        }))
    }
}

/// A sampler with its source loaded, ready to run.
pub struct Sampler {
    spec: SamplerSpec,
    source: Source,
    header: Option<String>,
}

impl Sampler {
    /// Checks the spec and loads the replay source (or opens the live
    /// interfaces).
    pub fn open(spec: SamplerSpec) -> Result<Self, SamplerError> {
        spec.check()?;
        let (source, header) = Source::open(&spec)?;
        Ok(Self { spec, source, header })
    }

    pub fn spec(&self) -> &SamplerSpec {
        &self.spec
    }

    pub fn set_output(&mut self, path: impl Into<PathBuf>) {
        self.spec.output_path = path.into();
    }

    pub fn set_start_at(&mut self, t: Option<f64>) {
        self.spec.start_at = t;
    }

    /// Emits samples until stopped (or, for replay, until the source is
    /// exhausted). Returns the number of sample lines written.
    pub fn run(mut self, clock: &dyn Clock, stop: &StopSignal) -> Result<u64, SamplerError> {
        let spec = &self.spec;
        let out_err = |source| SamplerError::Output {
            path: spec.output_path.clone(),
            source,
        };
        let mut out = BufWriter::new(File::create(&spec.output_path).map_err(out_err)?);
        if let Some(h) = &self.header {
            writeln!(out, "{h}").and_then(|_| out.flush()).map_err(out_err)?;
        }
        let period = spec.period_s;
        let t0 = spec.start_at.unwrap_or_else(|| clock.now());
        // schedule origin; moves forward after a late wake-up so one stall
        // costs one long interval rather than a long one plus a short one
        let mut base = t0;
        let mut k: u64 = 0;
        let mut written = 0u64;
        let mut cursor = 0usize;
        let mut last_tfs = -1.0f64;
        let mut last_elapsed = 0.0;
        loop {
            k += 1;
            let target = base + k as f64 * period;
            let wait = target - clock.now();
            if wait > 0.0 {
                clock.sleep(wait);
            }
            if stop.is_stopped() {
                break;
            }
            let now = clock.now();
            let elapsed = now - t0;
            if now - target > LATE_FRACTION * period {
                base = now - k as f64 * period;
            }
            let mut tfs = (elapsed * 1000.0).round() / 1000.0;
            if tfs <= last_tfs {
                tfs = ((last_tfs + 0.001) * 1000.0).round() / 1000.0;
            }
            let anchor = TimeAnchor::new(WallClock::from_seconds_of_day(clock.wall_seconds_of_day()), tfs);
            let dt = (elapsed - last_elapsed).max(1e-6);
            let Some(line) = self.source.line(&mut cursor, anchor, dt)? else {
                break;
            };
            writeln!(out, "{line}").and_then(|_| out.flush()).map_err(out_err)?;
            written += 1;
            last_tfs = tfs;
            last_elapsed = elapsed;
        }
        Ok(written)
    }
}

/// Lateness, as a fraction of the period, beyond which the schedule is
/// re-phased to the actual wake-up time.
const LATE_FRACTION: f64 = 0.1;

/// Opens and runs a sampler until stopped (or, for replay, until the source
/// is exhausted). Returns the number of sample lines written.
pub fn run_sampler(spec: &SamplerSpec, clock: &dyn Clock, stop: &StopSignal) -> Result<u64, SamplerError> {
    Sampler::open(spec.clone())?.run(clock, stop)
}

/// Gaps between consecutive sample TFS values of a sampler log.
pub fn tfs_gaps(text: &str, mic: bool) -> Result<Vec<f64>, ParseError> {
    let tfs: Vec<f64> = if mic {
        parse_mic_sampler(text)?.iter().map(|s| s.anchor.tfs).collect()
    } else {
        parse_host_sampler(text)?.iter().map(|s| s.0.anchor.tfs).collect()
    };
    Ok(tfs.windows(2).map(|w| w[1] - w[0]).collect())
}

/// Fraction of gaps within `±rel` of `period`. Gaps come from millisecond
/// TFS values, so only float representation error is allowed beyond `rel`.
pub fn fraction_within(gaps: &[f64], period: f64, rel: f64) -> f64 {
    if gaps.is_empty() {
        return 0.0;
    }
    gaps.iter().filter(|g| (*g - period).abs() <= rel * period + 1e-9).count() as f64 / gaps.len() as f64
}
