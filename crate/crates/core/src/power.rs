//! Idle/active attribution of power samples and per-state energy.
//!
//! Host: idle during communication (inner transfer, halo exchange, reduce)
//! and the whole force phase, which contains the offload (accelerator compute
//! plus PCI transfer); active for the rest of the application run.
//! MIC: active while an offload computes on the device, idle otherwise.
//! Everything outside the application run is idle for both.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AppTimeline, Device, DeviceStateReport, OffloadRecord, PhaseTimings, RunConfig};
use crate::sync::{StreamId, SyncError, SyncedTimeline, END_EVENT, START_EVENT};
use crate::warning::{Warning, WarningKind};

/// Phases during which the host is idle.
pub const HOST_IDLE_PHASES: [&str; 4] = ["inner_transfer", "halo_exchange", "reduce", "force"];
/// Phases whose counters feed the host communication metrics.
pub const HOST_COMM_PHASES: [&str; 3] = ["inner_transfer", "halo_exchange", "reduce"];

pub fn begin_event(phase: &str) -> String {
    format!("{phase}.begin")
}

pub fn end_event(phase: &str) -> String {
    format!("{phase}.end")
}

/// Event name prefix of the offload with the given tag, e.g. `offload#5`.
pub fn offload_phase(tag: u64) -> String {
    format!("offload#{tag}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PowerState {
    Idle,
    Active,
}

/// `[start, end)` in global seconds; the last window of a device is closed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateWindow {
    pub start: f64,
    pub end: f64,
    pub state: PowerState,
}

impl StateWindow {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StateWindows {
    pub per_device: BTreeMap<Device, Vec<StateWindow>>,
}

#[derive(Debug, Error, PartialEq)]
pub enum PowerError {
    #[error("rank {rank}: cannot place phase {phase}: {reason}")]
    UnplaceablePhase { rank: u32, phase: String, reason: String },
    #[error("{device}: sample at {time:.3} s lies outside every state window")]
    Coverage { device: Device, time: f64 },
    #[error(transparent)]
    Sync(#[from] SyncError),
}

/// Global `[begin, end]` intervals of every instance of `phase` in a rank's
/// events, in order.
pub fn phase_intervals(
    app: &AppTimeline,
    timeline: &SyncedTimeline,
    phase: &str,
) -> Result<Vec<(f64, f64)>, PowerError> {
    let (b, e) = (begin_event(phase), end_event(phase));
    let stream = StreamId::App(app.rank);
    let mut out = Vec::new();
    let mut open: Option<f64> = None;
    let unplaceable = |reason: &str| PowerError::UnplaceablePhase {
        rank: app.rank,
        phase: phase.to_string(),
        reason: reason.to_string(),
    };
    for (name, anchor) in &app.event_anchors {
        if *name == b {
            if open.is_some() {
                return Err(unplaceable("begin without end"));
            }
            open = Some(timeline.to_global(stream, anchor.tfs)?);
        } else if *name == e {
            let start = open.take().ok_or_else(|| unplaceable("end without begin"))?;
            out.push((start, timeline.to_global(stream, anchor.tfs)?));
        }
    }
    if open.is_some() {
        return Err(unplaceable("begin without end"));
    }
    Ok(out)
}

fn single_event(app: &AppTimeline, timeline: &SyncedTimeline, name: &str) -> Result<f64, PowerError> {
    let anchor = app
        .event_anchors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, a)| a)
        .ok_or_else(|| PowerError::UnplaceablePhase {
            rank: app.rank,
            phase: name.to_string(),
            reason: "event missing".into(),
        })?;
    Ok(timeline.to_global(StreamId::App(app.rank), anchor.tfs)?)
}

/// Sorted, merged union of intervals.
pub fn union(mut intervals: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    intervals.retain(|(a, b)| b > a);
    intervals.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(intervals.len());
    for (a, b) in intervals {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

/// Covers `span` with ordered, disjoint windows: `active` intervals (clipped
/// to the span) are active, the rest idle.
pub fn compose_windows(span: (f64, f64), active: Vec<(f64, f64)>) -> Vec<StateWindow> {
    let (lo, hi) = span;
    let mut out = Vec::new();
    let mut cursor = lo;
    let clipped = union(active.into_iter().map(|(a, b)| (a.max(lo), b.min(hi))).collect());
    for (a, b) in clipped {
        if a > cursor {
            out.push(StateWindow {
                start: cursor,
                end: a,
                state: PowerState::Idle,
            });
        }
        out.push(StateWindow {
            start: a,
            end: b,
            state: PowerState::Active,
        });
        cursor = b;
    }
    if cursor < hi || out.is_empty() {
        out.push(StateWindow {
            start: cursor,
            end: hi,
            state: PowerState::Idle,
        });
    }
    out
}

/// Subtracts the union of `holes` from `[lo, hi]`.
fn subtract(lo: f64, hi: f64, holes: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut cursor = lo;
    for (a, b) in union(holes) {
        if b <= cursor {
            continue;
        }
        if a >= hi {
            break;
        }
        if a > cursor {
            out.push((cursor, a));
        }
        cursor = cursor.max(b);
    }
    if cursor < hi {
        out.push((cursor, hi));
    }
    out
}

/// Host active intervals for one rank: in-run time minus idle phases.
pub fn host_active_intervals(app: &AppTimeline, timeline: &SyncedTimeline) -> Result<Vec<(f64, f64)>, PowerError> {
    let start = single_event(app, timeline, START_EVENT)?;
    let end = single_event(app, timeline, END_EVENT)?;
    let mut idle = Vec::new();
    for phase in HOST_IDLE_PHASES {
        idle.extend(phase_intervals(app, timeline, phase)?);
    }
    Ok(subtract(start, end, idle))
}

/// Host communication intervals (global) for one rank.
pub fn host_comm_intervals(app: &AppTimeline, timeline: &SyncedTimeline) -> Result<Vec<(f64, f64)>, PowerError> {
    let mut v = Vec::new();
    for phase in HOST_COMM_PHASES {
        v.extend(phase_intervals(app, timeline, phase)?);
    }
    Ok(union(v))
}

/// Device-compute interval inside one offload's host-visible span. The
/// transfer overhead is split before/after in proportion to bytes moved each
/// way.
pub fn offload_compute_interval(begin: f64, end: f64, record: &OffloadRecord) -> (f64, f64) {
    let overhead = ((end - begin) - record.mic_time_s).max(0.0);
    let total = record.bytes_total();
    let before = if total == 0 {
        0.5 * overhead
    } else {
        overhead * record.bytes_to_device as f64 / total as f64
    };
    let a = (begin + before).min(end);
    (a, (a + record.mic_time_s).min(end))
}

/// MIC active intervals for records of `ranks` on device `device`.
pub fn mic_active_intervals(
    apps: &BTreeMap<u32, AppTimeline>,
    offloads: &[OffloadRecord],
    ranks: &[u32],
    device: u32,
    timeline: &SyncedTimeline,
) -> Result<Vec<(f64, f64)>, PowerError> {
    let mut by_rank_tag: BTreeMap<(u32, u64), &OffloadRecord> = BTreeMap::new();
    for r in offloads.iter().filter(|r| r.device_id == device && ranks.contains(&r.rank)) {
        by_rank_tag.insert((r.rank, r.tag), r);
    }
    let mut out = Vec::with_capacity(by_rank_tag.len());
    for ((rank, tag), rec) in by_rank_tag {
        let phase = offload_phase(tag);
        let app = apps.get(&rank).ok_or_else(|| PowerError::UnplaceablePhase {
            rank,
            phase: phase.clone(),
            reason: "no application timeline for rank".into(),
        })?;
        let spans = phase_intervals(app, timeline, &phase)?;
        let [(b, e)] = spans[..] else {
            return Err(PowerError::UnplaceablePhase {
                rank,
                phase,
                reason: format!("expected one begin/end pair, found {}", spans.len()),
            });
        };
        out.push(offload_compute_interval(b, e, rec));
    }
    Ok(union(out))
}

/// Sample span `[first, last]` per device, in global seconds.
pub type DeviceSpans = BTreeMap<Device, (f64, f64)>;

/// State windows for every device that has a sample span. Host windows follow
/// the lowest rank placed on that node; MIC windows take the union of
/// offload intervals of all ranks on the node that targeted the device.
pub fn build_state_windows(
    config: &RunConfig,
    phases: Option<&PhaseTimings>,
    timeline: &SyncedTimeline,
    apps: &BTreeMap<u32, AppTimeline>,
    offloads: &[OffloadRecord],
    spans: &DeviceSpans,
    warnings: &mut Vec<Warning>,
) -> Result<StateWindows, PowerError> {
    let mut per_device = BTreeMap::new();
    for (&device, &span) in spans {
        let active = match device {
            Device::Host { node } => match apps.keys().find(|r| config.node_of_rank(**r) == node) {
                Some(rank) => {
                    let active = host_active_intervals(&apps[rank], timeline)?;
                    if let Some(p) = phases.filter(|_| *rank == *apps.keys().next().unwrap_or(&0)) {
                        let placed: f64 = active.iter().map(|(a, b)| b - a).sum();
                        let budget = PHASE_MATCH_FRACTION * p.loop_total_s + timeline.tolerances.get(&StreamId::App(*rank)).copied().unwrap_or(0.0);
                        if (placed - p.host_compute_s).abs() > budget {
                            warnings.push(Warning::new(
                                WarningKind::PhaseMismatch,
                                format!(
                                    "{device}: event-placed active time {placed:.3} s differs from timer host compute {:.3} s",
                                    p.host_compute_s
                                ),
                            ));
                        }
                    }
                    active
                }
                None => Vec::new(),
            },
            Device::Mic { node, device: dev } => {
                let ranks: Vec<u32> = apps.keys().copied().filter(|r| config.node_of_rank(*r) == node).collect();
                mic_active_intervals(apps, offloads, &ranks, dev, timeline)?
            }
        };
        per_device.insert(device, compose_windows(span, active));
    }
    Ok(StateWindows { per_device })
}

/// Event-placed host activity may differ from the timers by this fraction of
/// loop time (timer overhead and unattributed gaps) before a warning.
pub const PHASE_MATCH_FRACTION: f64 = 0.02;

/// Averages samples per state and integrates energy over window durations.
/// `samples` are `(global seconds, watts)`; a sample exactly on a window edge
/// belongs to the later window.
pub fn attribute_power(
    device: Device,
    samples: &[(f64, f64)],
    windows: &[StateWindow],
) -> Result<DeviceStateReport, PowerError> {
    let mut sum = [0.0f64; 2];
    let mut count = [0usize; 2];
    let mut time = [0.0f64; 2];
    let idx = |s: PowerState| match s {
        PowerState::Idle => 0,
        PowerState::Active => 1,
    };
    for w in windows {
        time[idx(w.state)] += w.duration();
    }
    let last_end = windows.last().map(|w| w.end);
    for &(t, watts) in samples {
        let pos = windows.partition_point(|w| w.start <= t);
        let covered = pos > 0 && {
            let w = &windows[pos - 1];
            t < w.end || (pos == windows.len() && Some(t) == last_end)
        };
        if !covered {
            return Err(PowerError::Coverage { device, time: t });
        }
        let i = idx(windows[pos - 1].state);
        sum[i] += watts;
        count[i] += 1;
    }
    let avg = |i: usize| if count[i] == 0 { 0.0 } else { sum[i] / count[i] as f64 };
    Ok(DeviceStateReport::from_states(
        device,
        (avg(0), count[0], time[0]),
        (avg(1), count[1], time[1]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{TimeAnchor, WallClock};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn timeline() -> SyncedTimeline {
        SyncedTimeline {
            origin: TimeAnchor::new(WallClock::new(12, 0, 0).unwrap(), 0.0),
            offsets: [(StreamId::App(0), 0.0), (StreamId::Host(0), -20.0)].into_iter().collect(),
            tolerances: BTreeMap::new(),
        }
    }

    fn app(events: &[(&str, f64)]) -> AppTimeline {
        AppTimeline {
            rank: 0,
            named_timers: BTreeMap::new(),
            event_anchors: events
                .iter()
                .map(|(n, t)| (n.to_string(), TimeAnchor::new(WallClock::from_seconds_of_day(43_200.0 + t), *t)))
                .collect(),
        }
    }

    #[test]
    fn force_phase_and_comm_are_host_idle() {
        let a = app(&[
            ("start", 0.0),
            ("halo_exchange.begin", 20.0),
            ("halo_exchange.end", 25.0),
            ("force.begin", 40.0),
            ("force.end", 110.0),
            ("end", 120.0),
        ]);
        let active = host_active_intervals(&a, &timeline()).unwrap();
        assert_eq!(active, vec![(0.0, 20.0), (25.0, 40.0), (110.0, 120.0)]);
        let w = compose_windows((-20.0, 130.0), active);
        let idle: Vec<_> = w.iter().filter(|w| w.state == PowerState::Idle).map(|w| (w.start, w.end)).collect();
        assert_eq!(idle, vec![(-20.0, 0.0), (20.0, 25.0), (40.0, 110.0), (120.0, 130.0)]);
    }

    #[test]
    fn unmatched_phase_is_unplaceable() {
        let a = app(&[("start", 0.0), ("force.begin", 40.0), ("end", 120.0)]);
        let err = host_active_intervals(&a, &timeline()).unwrap_err();
        assert!(matches!(err, PowerError::UnplaceablePhase { ref phase, .. } if phase == "force"));
        let no_end = app(&[("start", 0.0)]);
        assert!(matches!(
            host_active_intervals(&no_end, &timeline()).unwrap_err(),
            PowerError::UnplaceablePhase { ref phase, .. } if phase == "end"
        ));
    }

    #[test]
    fn no_offloads_means_mic_idle_throughout() {
        let w = compose_windows((-18.0, 130.0), Vec::new());
        assert_eq!(w, vec![StateWindow { start: -18.0, end: 130.0, state: PowerState::Idle }]);
        let samples: Vec<_> = (0..100).map(|i| (-18.0 + i as f64, 45.0)).collect();
        let r = attribute_power(Device::Mic { node: 0, device: 0 }, &samples, &w).unwrap();
        assert_eq!((r.active_samples, r.active_watts_avg), (0, 0.0));
        assert!(r.low_sample_warning);
        assert_eq!(r.idle_watts_avg, 45.0);
    }

    #[test]
    fn closed_form_energy() {
        let windows = [
            StateWindow { start: 0.0, end: 10.0, state: PowerState::Idle },
            StateWindow { start: 10.0, end: 30.0, state: PowerState::Active },
        ];
        let mut samples: Vec<_> = (0..100).map(|i| (i as f64 * 0.1, 40.0)).collect();
        samples.extend((0..200).map(|i| (10.0 + i as f64 * 0.1, 150.0)));
        let r = attribute_power(Device::Host { node: 0 }, &samples, &windows).unwrap();
        assert_eq!((r.idle_samples, r.active_samples), (100, 200));
        assert_eq!((r.idle_watts_avg, r.active_watts_avg), (40.0, 150.0));
        assert_eq!(r.energy_j, 400.0 + 3000.0);
        assert!(!r.low_sample_warning);
    }

    #[test]
    fn boundary_sample_goes_to_later_window() {
        let windows = [
            StateWindow { start: 0.0, end: 1.0, state: PowerState::Idle },
            StateWindow { start: 1.0, end: 2.0, state: PowerState::Active },
        ];
        let r = attribute_power(Device::Host { node: 0 }, &[(1.0, 10.0), (2.0, 20.0)], &windows).unwrap();
        assert_eq!((r.idle_samples, r.active_samples), (0, 2));
        let err = attribute_power(Device::Host { node: 0 }, &[(2.5, 1.0)], &windows).unwrap_err();
        assert!(matches!(err, PowerError::Coverage { .. }));
        assert!(attribute_power(Device::Host { node: 0 }, &[(-0.1, 1.0)], &windows).is_err());
    }

    #[test]
    fn offload_compute_split_by_bytes() {
        let rec = OffloadRecord {
            rank: 0,
            device_id: 0,
            tag: 1,
            cpu_time_s: 1.1,
            mic_time_s: 1.0,
            bytes_to_device: 300,
            bytes_from_device: 100,
            counters: BTreeMap::new(),
        };
        let (a, b) = offload_compute_interval(10.0, 11.1, &rec);
        assert!((a - 10.075).abs() < 1e-12);
        assert!((b - 11.075).abs() < 1e-12);
    }

    #[test]
    fn union_merges_overlaps() {
        assert_eq!(union(vec![(3.0, 4.0), (0.0, 1.0), (0.5, 2.0), (5.0, 5.0)]), vec![(0.0, 2.0), (3.0, 4.0)]);
    }

    #[test]
    fn idle_baseline_from_pre_run_span() {
        // 20 s pre-run at 10 ms holds well over 10 s of idle samples
        let a = app(&[("start", 0.0), ("end", 30.0)]);
        let active = host_active_intervals(&a, &timeline()).unwrap();
        let w = compose_windows((-20.0, 40.0), active);
        let samples: Vec<_> = (0..=6000).map(|i| (-20.0 + i as f64 * 0.01, if i < 2000 || i >= 5000 { 40.0 } else { 150.0 })).collect();
        let r = attribute_power(Device::Host { node: 0 }, &samples, &w).unwrap();
        let pre: Vec<_> = samples.iter().filter(|s| s.0 < 0.0).collect();
        assert!(pre.last().unwrap().0 - pre[0].0 >= 10.0);
        assert!((r.idle_watts_avg - 40.0).abs() < 1e-9);
        assert!((r.active_watts_avg - 150.0).abs() < 1e-9);
    }

    #[test]
    fn square_wave_recovery_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 2.0).unwrap();
        let period = 0.01;
        // alternating 2 s states: 200 samples per window
        let active: Vec<_> = (0..10).map(|k| (4.0 * k as f64 + 2.0, 4.0 * k as f64 + 4.0)).collect();
        let windows = compose_windows((0.0, 40.0), active.clone());
        let samples: Vec<_> = (0..4000)
            .map(|i| {
                let t = i as f64 * period;
                let on = active.iter().any(|(a, b)| t >= *a && t < *b);
                (t, (if on { 150.0f64 } else { 40.0 } + noise.sample(&mut rng)).max(0.0))
            })
            .collect();
        let r = attribute_power(Device::Host { node: 0 }, &samples, &windows).unwrap();
        assert!((r.active_watts_avg - 150.0).abs() / 150.0 < 0.01);
        assert!((r.idle_watts_avg - 40.0).abs() / 40.0 < 0.01);
    }

    proptest! {
        #[test]
        fn conservation_and_bounds(
            cuts in prop::collection::vec(0.0f64..100.0, 0..12),
            watts in prop::collection::vec(0.0f64..300.0, 1..300),
        ) {
            let mut c = cuts.clone();
            c.sort_by(f64::total_cmp);
            let active: Vec<_> = c.chunks(2).filter(|p| p.len() == 2).map(|p| (p[0], p[1])).collect();
            let windows = compose_windows((0.0, 100.0), active);
            let n = watts.len();
            let samples: Vec<_> = watts.iter().enumerate().map(|(i, w)| (100.0 * i as f64 / n as f64, *w)).collect();
            let r = attribute_power(Device::Host { node: 0 }, &samples, &windows).unwrap();
            prop_assert_eq!(r.idle_samples + r.active_samples, n);
            let lo = watts.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = watts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (avg, cnt) in [(r.idle_watts_avg, r.idle_samples), (r.active_watts_avg, r.active_samples)] {
                if cnt > 0 {
                    prop_assert!(avg >= lo - 1e-9 && avg <= hi + 1e-9);
                }
            }
            prop_assert!((r.idle_time_s + r.active_time_s - 100.0).abs() < 1e-9);
            for pair in windows.windows(2) {
                prop_assert_eq!(pair[0].end, pair[1].start);
            }
        }
    }
}
