//! Parsers for the four run artifacts: host sampler log, MIC sampler log,
//! application timing output and offload report.

pub mod app;
pub mod grammar;
pub mod host;
pub mod mic;
pub mod offload;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{AppTimeline, HostPowerSample, MicPowerSample, OffloadRecord, PerfSample, TimeAnchor};
use crate::par::{self, ExecMode};

pub use app::{format_app_timeline, parse_app_output};
pub use grammar::format_anchor;
pub use host::{format_host_line, parse_host_sampler};
pub use mic::{format_mic_line, parse_mic_sampler};
pub use offload::{format_offload_record, parse_offload_report};

pub const APP_OUT: &str = "app.out";
pub const OFFLOAD_REPORT: &str = "offload.rpt";

pub fn host_log_name(node: u32) -> String {
    format!("host-{node}.log")
}

pub fn mic_log_name(node: u32, device: u32) -> String {
    format!("mic-{node}-{device}.log")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IncompleteRecord {
    pub rank: u32,
    pub tag: u64,
    pub first_line: usize,
    pub missing: Vec<&'static str>,
}

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("line {line}: malformed {what}: `{token}`")]
    Malformed {
        line: usize,
        what: &'static str,
        token: String,
    },
    #[error("line {line}: missing {field}")]
    MissingField { line: usize, field: String },
    #[error(
        "line {line}: tfs not increasing: [{}] {:.3} follows [{}] {:.3}",
        current.wall_clock, current.tfs, previous.wall_clock, previous.tfs
    )]
    NonMonotonic {
        line: usize,
        previous: TimeAnchor,
        current: TimeAnchor,
    },
    #[error("incomplete offload records: {}", describe_incomplete(.0))]
    IncompleteRecords(Vec<IncompleteRecord>),
    #[error("line {line}: duplicate {field} for rank {rank} tag {tag}")]
    DuplicateField {
        line: usize,
        rank: u32,
        tag: u64,
        field: String,
    },
    #[error("rank {rank} missing timer {timer}")]
    MissingTimer { rank: u32, timer: String },
}

fn describe_incomplete(v: &[IncompleteRecord]) -> String {
    v.iter()
        .map(|r| format!("rank {} tag {} (line {}) missing {}", r.rank, r.tag, r.first_line, r.missing.join(", ")))
        .collect::<Vec<_>>()
        .join("; ")
}

pub(crate) fn check_monotonic(line: usize, previous: &TimeAnchor, current: &TimeAnchor) -> Result<(), ParseError> {
    if current.tfs > previous.tfs {
        Ok(())
    } else {
        Err(ParseError::NonMonotonic {
            line,
            previous: *previous,
            current: *current,
        })
    }
}

/// Everything parsed out of one run directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedRun {
    pub host_power: BTreeMap<u32, Vec<HostPowerSample>>,
    pub host_perf: BTreeMap<u32, Vec<PerfSample>>,
    /// Keyed by `(node, device)`.
    pub mic_power: BTreeMap<(u32, u32), Vec<MicPowerSample>>,
    pub offloads: Vec<OffloadRecord>,
    pub app: BTreeMap<u32, AppTimeline>,
}

impl ParsedRun {
    pub fn insert_host(&mut self, node: u32, samples: Vec<(HostPowerSample, PerfSample)>) {
        let (power, perf) = samples.into_iter().unzip();
        self.host_power.insert(node, power);
        self.host_perf.insert(node, perf);
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Parse {
        path: PathBuf,
        #[source]
        source: ParseError,
    },
    #[error("{}: missing artifact {name}", dir.display())]
    Missing { dir: PathBuf, name: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArtifactKind {
    Host(u32),
    Mic(u32, u32),
    App,
    Offload,
}

/// Classifies a run-directory file name.
pub fn classify(name: &str) -> Option<ArtifactKind> {
    if name == APP_OUT {
        return Some(ArtifactKind::App);
    }
    if name == OFFLOAD_REPORT {
        return Some(ArtifactKind::Offload);
    }
    let stem = name.strip_suffix(".log")?;
    if let Some(n) = stem.strip_prefix("host-") {
        return n.parse().ok().map(ArtifactKind::Host);
    }
    let (n, d) = stem.strip_prefix("mic-")?.split_once('-')?;
    Some(ArtifactKind::Mic(n.parse().ok()?, d.parse().ok()?))
}

enum Parsed {
    Host(u32, Vec<(HostPowerSample, PerfSample)>),
    Mic(u32, u32, Vec<MicPowerSample>),
    App(BTreeMap<u32, AppTimeline>),
    Offload(Vec<OffloadRecord>),
}

fn parse_file(path: &Path, kind: &ArtifactKind) -> Result<Parsed, LoadError> {
    let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let wrap = |source| LoadError::Parse {
        path: path.to_path_buf(),
        source,
    };
    Ok(match kind {
        ArtifactKind::Host(n) => Parsed::Host(*n, parse_host_sampler(&text).map_err(wrap)?),
        ArtifactKind::Mic(n, d) => Parsed::Mic(*n, *d, parse_mic_sampler(&text).map_err(wrap)?),
        ArtifactKind::App => Parsed::App(parse_app_output(&text).map_err(wrap)?),
        ArtifactKind::Offload => Parsed::Offload(parse_offload_report(&text).map_err(wrap)?),
    })
}

/// Parses every artifact in `dir`. `app.out` and `offload.rpt` must exist;
/// sampler logs are discovered by name.
pub fn load_run_dir(dir: &Path, mode: ExecMode) -> Result<ParsedRun, LoadError> {
    let io = |source| LoadError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let entry = entry.map_err(io)?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(kind) = classify(&name) {
            files.push((entry.path(), kind));
        }
    }
    for required in [APP_OUT, OFFLOAD_REPORT] {
        if !files.iter().any(|(p, _)| p.file_name().is_some_and(|n| n == required)) {
            return Err(LoadError::Missing {
                dir: dir.to_path_buf(),
                name: required.to_string(),
            });
        }
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));
    let parsed = par::try_map(mode, &files, |(path, kind)| parse_file(path, kind))?;
    let mut run = ParsedRun::default();
    for p in parsed {
        match p {
            Parsed::Host(n, v) => run.insert_host(n, v),
            Parsed::Mic(n, d, v) => {
                run.mic_power.insert((n, d), v);
            }
            Parsed::App(m) => run.app = m,
            Parsed::Offload(v) => run.offloads = v,
        }
    }
    Ok(run)
}
