//! Places every sample stream on one run-relative clock.
//!
//! Each anchor carries a 1-second wall-clock stamp and a millisecond TFS
//! value. For a stream `S` with unknown offset `off_S` (global = tfs + off_S)
//! and an origin whose true wall time is `w_o + f_o` (`f_o` in `[0, 1)`), every
//! anchor `(w_i, t_i)` satisfies
//!
//! ```text
//!     floor(w_o + f_o + t_i + off_S) = w_i
//!  => off_S + f_o  in  [D_i - t_i, D_i - t_i + 1),   D_i = w_i - w_o (unwrapped)
//! ```
//!
//! Intersecting these intervals over all anchors pins `off_S + f_o` to within
//! roughly the spacing of the anchors that straddle second boundaries; the
//! origin stream's own events pin `f_o` the same way. The offset is the
//! difference of the two interval midpoints. A stream whose intervals leave a
//! gap wider than its tolerance has no feasible offset.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{wrap_half_day, TimeAnchor, WallClock};
use crate::trace::ParsedRun;

pub const DEFAULT_HOST_TOLERANCE_S: f64 = 0.020;
pub const DEFAULT_MIC_TOLERANCE_S: f64 = 0.100;
pub const START_EVENT: &str = "start";
pub const END_EVENT: &str = "end";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum StreamId {
    Host(u32),
    Mic(u32, u32),
    App(u32),
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StreamId::Host(n) => write!(f, "host-{n}"),
            StreamId::Mic(n, d) => write!(f, "mic-{n}-{d}"),
            StreamId::App(r) => write!(f, "app-{r}"),
        }
    }
}

impl FromStr for StreamId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("unknown stream id `{s}`");
        if let Some(n) = s.strip_prefix("host-") {
            return n.parse().map(StreamId::Host).map_err(|_| bad());
        }
        if let Some(r) = s.strip_prefix("app-") {
            return r.parse().map(StreamId::App).map_err(|_| bad());
        }
        let (n, d) = s.strip_prefix("mic-").and_then(|r| r.split_once('-')).ok_or_else(bad)?;
        Ok(StreamId::Mic(n.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?))
    }
}

impl From<StreamId> for String {
    fn from(id: StreamId) -> String {
        id.to_string()
    }
}

impl TryFrom<String> for StreamId {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Per-device-class error budgets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncTolerances {
    pub host_s: f64,
    pub mic_s: f64,
}

impl Default for SyncTolerances {
    fn default() -> Self {
        Self {
            host_s: DEFAULT_HOST_TOLERANCE_S,
            mic_s: DEFAULT_MIC_TOLERANCE_S,
        }
    }
}

impl SyncTolerances {
    pub fn for_stream(&self, id: StreamId) -> f64 {
        match id {
            StreamId::Mic(..) => self.mic_s,
            StreamId::Host(_) | StreamId::App(_) => self.host_s,
        }
    }

    pub fn combined(&self) -> f64 {
        self.host_s + self.mic_s
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SyncError {
    #[error("application timeline has no `{START_EVENT}` event")]
    MissingStart,
    #[error("stream {0} has no anchors")]
    EmptyStream(StreamId),
    #[error("stream {stream} cannot be synchronized: wall clock and tfs disagree by {gap_s:.3} s beyond the 1 s stamp resolution (tolerance {tolerance_s:.3} s)")]
    Unsynchronizable {
        stream: StreamId,
        gap_s: f64,
        tolerance_s: f64,
    },
    #[error("unknown stream {0}")]
    UnknownStream(StreamId),
}

/// Feasible interval of `offset + origin fraction` for one stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feasible {
    pub lower: f64,
    pub upper: f64,
}

impl Feasible {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncedTimeline {
    /// Application start event of the root rank; global time zero.
    pub origin: TimeAnchor,
    pub offsets: BTreeMap<StreamId, f64>,
    pub tolerances: BTreeMap<StreamId, f64>,
}

impl SyncedTimeline {
    pub fn offset(&self, stream: StreamId) -> Result<f64, SyncError> {
        self.offsets.get(&stream).copied().ok_or(SyncError::UnknownStream(stream))
    }

    /// Converts a stream-local TFS to global (origin-relative) seconds.
    pub fn to_global(&self, stream: StreamId, tfs: f64) -> Result<f64, SyncError> {
        Ok(tfs + self.offset(stream)?)
    }
}

/// Intersects the per-anchor intervals for `anchors` relative to the origin
/// wall clock `origin_wall`.
fn feasible(
    stream: StreamId,
    anchors: &[TimeAnchor],
    origin_wall: &WallClock,
    tolerance_s: f64,
) -> Result<Feasible, SyncError> {
    let first = anchors.first().ok_or(SyncError::EmptyStream(stream))?;
    let d_first = first.wall_clock.diff_wrapped(origin_wall);
    let mut lower = f64::NEG_INFINITY;
    let mut upper = f64::INFINITY;
    for a in anchors {
        let dt = a.tfs - first.tfs;
        let wall_dt = dt.round() + wrap_half_day(a.wall_clock.diff_wrapped(&first.wall_clock) - dt.round() as i64) as f64;
        let d = d_first as f64 + wall_dt;
        lower = lower.max(d - a.tfs);
        upper = upper.min(d - a.tfs + 1.0);
    }
    let gap = lower - upper;
    if gap > tolerance_s {
        return Err(SyncError::Unsynchronizable {
            stream,
            gap_s: gap,
            tolerance_s,
        });
    }
    if gap > 0.0 {
        // slightly inconsistent stamps; use the middle of the gap
        std::mem::swap(&mut lower, &mut upper);
    }
    Ok(Feasible { lower, upper })
}

/// Anchor list per stream, as the synchronizer sees a parsed run.
pub fn stream_anchors(parsed: &ParsedRun) -> BTreeMap<StreamId, Vec<TimeAnchor>> {
    let mut out = BTreeMap::new();
    for (node, samples) in &parsed.host_power {
        out.insert(StreamId::Host(*node), samples.iter().map(|s| s.anchor).collect());
    }
    for ((node, dev), samples) in &parsed.mic_power {
        out.insert(StreamId::Mic(*node, *dev), samples.iter().map(|s| s.anchor).collect());
    }
    for (rank, tl) in &parsed.app {
        out.insert(StreamId::App(*rank), tl.event_anchors.iter().map(|(_, a)| *a).collect());
    }
    out
}

/// Synchronizes every stream of a parsed run. The origin is the `start`
/// event of the lowest rank.
pub fn synchronize(parsed: &ParsedRun, tolerances: &SyncTolerances) -> Result<SyncedTimeline, SyncError> {
    let root = *parsed.app.keys().next().ok_or(SyncError::MissingStart)?;
    let origin = parsed.app[&root]
        .event_anchors
        .iter()
        .find(|(name, _)| name == START_EVENT)
        .map(|(_, a)| *a)
        .ok_or(SyncError::MissingStart)?;
    synchronize_streams(&stream_anchors(parsed), root, origin, tolerances)
}

/// Core of [`synchronize`] over bare anchor lists. `origin` must be one of the
/// anchors of `App(root)`.
pub fn synchronize_streams(
    streams: &BTreeMap<StreamId, Vec<TimeAnchor>>,
    root: u32,
    origin: TimeAnchor,
    tolerances: &SyncTolerances,
) -> Result<SyncedTimeline, SyncError> {
    let root_id = StreamId::App(root);
    let root_anchors = streams.get(&root_id).ok_or(SyncError::MissingStart)?;

    let origin_frac = feasible(root_id, root_anchors, &origin.wall_clock, tolerances.host_s)?;
    // relative to its own anchor the origin stream's interval is shifted by
    // the origin tfs; what remains is the origin's fraction of a second
    let f_lo = (origin_frac.lower + origin.tfs).max(0.0);
    let f_hi = (origin_frac.upper + origin.tfs).min(1.0);
    let f_mid = 0.5 * (f_lo + f_hi.max(f_lo));

    let mut offsets = BTreeMap::new();
    let mut tols = BTreeMap::new();
    for (&id, anchors) in streams {
        let tol = tolerances.for_stream(id);
        tols.insert(id, tol);
        if id == root_id {
            offsets.insert(id, -origin.tfs);
            continue;
        }
        let f = feasible(id, anchors, &origin.wall_clock, tol)?;
        offsets.insert(id, f.midpoint() - f_mid);
    }
    Ok(SyncedTimeline {
        origin,
        offsets,
        tolerances: tols,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent generator: anchors for a stream whose tfs zero sits at
    /// global time `-offset` relative to an origin at true wall time `origin_real`.
    fn stream(origin_real: f64, offset: f64, times: impl Iterator<Item = f64>) -> Vec<TimeAnchor> {
        times
            .map(|tfs| {
                let tfs = (tfs * 1000.0).round() / 1000.0;
                TimeAnchor::new(WallClock::from_seconds_of_day(origin_real + tfs + offset), tfs)
            })
            .collect()
    }

    fn jittered(rng: &mut ChaCha8Rng, period: f64, n: usize) -> Vec<f64> {
        let drift = 1.0 + rng.gen_range(0.001..0.01);
        let mut t = 0.0;
        (0..n)
            .map(|_| {
                let v = t;
                t += period * drift * (1.0 + rng.gen_range(-0.02..0.02));
                v
            })
            .collect()
    }

    fn app_events(rng: &mut ChaCha8Rng, span: f64) -> Vec<f64> {
        let mut t = 0.0;
        let mut v = vec![0.0];
        while t < span {
            t += rng.gen_range(0.05..0.6);
            v.push(t);
        }
        v
    }

    fn run(seed: u64, origin_real: f64, host_off: f64, mic_off: f64) -> (SyncedTimeline, f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut streams = BTreeMap::new();
        streams.insert(StreamId::App(0), stream(origin_real, 0.0, app_events(&mut rng, 100.0).into_iter()));
        let host_times = jittered(&mut rng, 0.010, 13_000);
        streams.insert(StreamId::Host(0), stream(origin_real, host_off, host_times.into_iter()));
        let mic_times = jittered(&mut rng, 0.050, 2_600);
        streams.insert(StreamId::Mic(0, 0), stream(origin_real, mic_off, mic_times.into_iter()));
        let origin = streams[&StreamId::App(0)][0];
        let tl = synchronize_streams(&streams, 0, origin, &SyncTolerances::default()).unwrap();
        (tl, host_off, mic_off)
    }

    #[test]
    fn recovers_known_offsets() {
        let (tl, h, m) = run(7, 47_100.37, -20.0, -17.3);
        let eh = (tl.offset(StreamId::Host(0)).unwrap() - h).abs();
        let em = (tl.offset(StreamId::Mic(0, 0)).unwrap() - m).abs();
        assert!(eh <= 0.020, "host error {eh}");
        assert!(em <= 0.100, "mic error {em}");
        assert_eq!(tl.offset(StreamId::App(0)).unwrap(), 0.0);
    }

    #[test]
    fn sampler_started_twenty_seconds_early() {
        let (tl, ..) = run(1, 3_600.9, -20.0, -19.0);
        assert!((tl.offset(StreamId::Host(0)).unwrap() + 20.0).abs() < 0.02);
    }

    #[test]
    fn single_stream_identity() {
        let mut streams = BTreeMap::new();
        let origin = TimeAnchor::new(WallClock::new(10, 0, 0).unwrap(), 0.0);
        streams.insert(StreamId::App(0), vec![origin]);
        let tl = synchronize_streams(&streams, 0, origin, &SyncTolerances::default()).unwrap();
        assert_eq!(tl.offsets[&StreamId::App(0)], 0.0);
        assert_eq!(tl.to_global(StreamId::App(0), 0.0).unwrap(), 0.0);
    }

    #[test]
    fn to_global_adds_offset() {
        let tl = SyncedTimeline {
            origin: TimeAnchor::new(WallClock::new(0, 0, 0).unwrap(), 0.0),
            offsets: [(StreamId::Host(0), -20.0)].into_iter().collect(),
            tolerances: BTreeMap::new(),
        };
        assert_eq!(tl.to_global(StreamId::Host(0), 25.5).unwrap(), 5.5);
        let g = tl.to_global(StreamId::Host(0), 12.345).unwrap();
        assert_eq!(g - tl.offset(StreamId::Host(0)).unwrap(), 12.345);
        assert_eq!(tl.to_global(StreamId::Mic(0, 0), 1.0), Err(SyncError::UnknownStream(StreamId::Mic(0, 0))));
    }

    #[test]
    fn crosses_midnight() {
        let (tl, h, m) = run(11, 86_380.25, -20.0, -18.5);
        assert!((tl.offset(StreamId::Host(0)).unwrap() - h).abs() <= 0.020);
        assert!((tl.offset(StreamId::Mic(0, 0)).unwrap() - m).abs() <= 0.100);
    }

    #[test]
    fn inconsistent_stream_is_rejected() {
        let mut streams = BTreeMap::new();
        let w = |s| WallClock::from_seconds_of_day(s);
        streams.insert(StreamId::App(0), vec![TimeAnchor::new(w(100.0), 0.0)]);
        // wall clock jumps 5 s while tfs advances 1 s
        streams.insert(
            StreamId::Host(0),
            vec![TimeAnchor::new(w(80.0), 0.0), TimeAnchor::new(w(86.0), 1.0)],
        );
        let origin = streams[&StreamId::App(0)][0];
        let err = synchronize_streams(&streams, 0, origin, &SyncTolerances::default()).unwrap_err();
        assert!(matches!(err, SyncError::Unsynchronizable { stream: StreamId::Host(0), .. }));
    }

    #[test]
    fn missing_start_and_empty_stream() {
        assert_eq!(synchronize(&ParsedRun::default(), &SyncTolerances::default()), Err(SyncError::MissingStart));
        let origin = TimeAnchor::new(WallClock::new(1, 0, 0).unwrap(), 0.0);
        let mut streams = BTreeMap::new();
        streams.insert(StreamId::App(0), vec![origin]);
        streams.insert(StreamId::Host(0), vec![]);
        assert_eq!(
            synchronize_streams(&streams, 0, origin, &SyncTolerances::default()),
            Err(SyncError::EmptyStream(StreamId::Host(0)))
        );
    }

    #[test]
    fn stream_id_text_form() {
        for id in [StreamId::Host(3), StreamId::Mic(1, 0), StreamId::App(12)] {
            assert_eq!(id.to_string().parse::<StreamId>().unwrap(), id);
        }
        assert!("gpu-0".parse::<StreamId>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn offset_recovery_within_tolerance(
            seed in 0u64..10_000,
            origin in 0.0f64..86_400.0,
            host_off in -300.0f64..300.0,
            mic_off in -300.0f64..300.0,
        ) {
            let (tl, h, m) = run(seed, origin, host_off, mic_off);
            prop_assert!((tl.offset(StreamId::Host(0)).unwrap() - h).abs() <= 0.020);
            prop_assert!((tl.offset(StreamId::Mic(0, 0)).unwrap() - m).abs() <= 0.100);
        }
    }
}
