//! Phase-time decomposition of a run from application timers and offload
//! records.
//!
//! * host compute = position + velocity + redistribute - inner_transfer
//! * host comm    = (halo_exchange, reduce)
//! * MIC compute  = sum of offload MIC times
//! * PCI transfer = sum(CPU time) - sum(MIC time), or, when any CPU time is
//!   unreported, loop - host compute - halo - reduce - MIC compute

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AppTimeline, OffloadRecord, PciMethod, PhaseTimings};
use crate::warning::{Warning, WarningKind};

#[derive(Debug, Error, PartialEq)]
pub enum PhaseError {
    #[error("rank {rank} missing timer {timer}")]
    MissingTimer { rank: u32, timer: &'static str },
    #[error("rank {rank}: inconsistent timers: {detail}")]
    InconsistentTimers { rank: u32, detail: String },
    #[error("rank {rank}: inconsistent accounting: PCI time {seconds:.6} s is more negative than -{tolerance_s:.3} s")]
    InconsistentAccounting { rank: u32, seconds: f64, tolerance_s: f64 },
    #[error("no application timelines")]
    NoRanks,
}

fn timer(app: &AppTimeline, name: &'static str) -> Result<f64, PhaseError> {
    app.timer(name).ok_or(PhaseError::MissingTimer {
        rank: app.rank,
        timer: name,
    })
}

pub fn host_compute_time(app: &AppTimeline) -> Result<f64, PhaseError> {
    let position = timer(app, "position")?;
    let velocity = timer(app, "velocity")?;
    let redistribute = timer(app, "redistribute")?;
    let inner = timer(app, "inner_transfer")?;
    let t = position + velocity + redistribute - inner;
    if t < 0.0 {
        return Err(PhaseError::InconsistentTimers {
            rank: app.rank,
            detail: format!("host compute {t:.6} s < 0 (inner_transfer {inner} s exceeds position + velocity + redistribute)"),
        });
    }
    Ok(t)
}

/// `(halo_exchange, reduce)` in seconds.
pub fn host_comm_times(app: &AppTimeline) -> Result<(f64, f64), PhaseError> {
    Ok((timer(app, "halo_exchange")?, timer(app, "reduce")?))
}

pub fn mic_compute_time(offloads: &[OffloadRecord]) -> f64 {
    offloads.iter().map(|r| r.mic_time_s).sum()
}

/// Host-side phase times already known when the PCI time is derived.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HostPhases {
    pub host_compute_s: f64,
    pub halo_exchange_s: f64,
    pub reduce_s: f64,
    pub mic_compute_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PciTime {
    pub seconds: f64,
    pub method: PciMethod,
    /// Raw (negative) value when it was clamped to zero.
    pub clamped_from: Option<f64>,
}

/// PCI time for one rank's offloads. Negative results within `tolerance_s`
/// clamp to zero; anything more negative is an accounting error.
pub fn pci_transfer_time(
    offloads: &[OffloadRecord],
    app: &AppTimeline,
    so_far: &HostPhases,
    tolerance_s: f64,
) -> Result<PciTime, PhaseError> {
    let (raw, method) = if offloads.iter().all(OffloadRecord::cpu_time_defined) {
        let cpu: f64 = offloads.iter().map(|r| r.cpu_time_s).sum();
        (cpu - mic_compute_time(offloads), PciMethod::OffloadDifference)
    } else {
        let lp = timer(app, "loop")?;
        (
            lp - so_far.host_compute_s - so_far.halo_exchange_s - so_far.reduce_s - so_far.mic_compute_s,
            PciMethod::Residual,
        )
    };
    if raw >= 0.0 {
        return Ok(PciTime {
            seconds: raw,
            method,
            clamped_from: None,
        });
    }
    if raw >= -tolerance_s {
        return Ok(PciTime {
            seconds: 0.0,
            method,
            clamped_from: Some(raw),
        });
    }
    Err(PhaseError::InconsistentAccounting {
        rank: app.rank,
        seconds: raw,
        tolerance_s,
    })
}

/// Residual-method PCI time regardless of whether CPU times are present.
pub fn residual_pci_time(app: &AppTimeline, so_far: &HostPhases) -> Result<f64, PhaseError> {
    Ok(timer(app, "loop")? - so_far.host_compute_s - so_far.halo_exchange_s - so_far.reduce_s - so_far.mic_compute_s)
}

/// Full decomposition for one rank.
pub fn rank_phases(
    app: &AppTimeline,
    offloads: &[OffloadRecord],
    tolerance_s: f64,
    warnings: &mut Vec<Warning>,
) -> Result<PhaseTimings, PhaseError> {
    let host_compute_s = host_compute_time(app)?;
    let (halo_exchange_s, reduce_s) = host_comm_times(app)?;
    let mic_compute_s = mic_compute_time(offloads);
    let so_far = HostPhases {
        host_compute_s,
        halo_exchange_s,
        reduce_s,
        mic_compute_s,
    };
    let pci = pci_transfer_time(offloads, app, &so_far, tolerance_s)?;
    if let Some(raw) = pci.clamped_from {
        warnings.push(Warning::new(
            WarningKind::ClampedPciTime,
            format!("rank {}: PCI time {raw:.6} s ({}) clamped to 0", app.rank, pci.method),
        ));
    }
    Ok(PhaseTimings {
        host_compute_s,
        halo_exchange_s,
        reduce_s,
        mic_compute_s,
        pci_transfer_s: pci.seconds,
        loop_total_s: timer(app, "loop")?,
        pci_method: pci.method,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseProfile {
    /// Root-rank phases; the run-level figures.
    pub root: PhaseTimings,
    pub per_rank: BTreeMap<u32, PhaseTimings>,
}

/// Phase times for every rank; offloads are matched to ranks by their rank
/// prefix.
pub fn profile_phases(
    apps: &BTreeMap<u32, AppTimeline>,
    offloads: &[OffloadRecord],
    tolerance_s: f64,
    warnings: &mut Vec<Warning>,
) -> Result<PhaseProfile, PhaseError> {
    let mut per_rank = BTreeMap::new();
    for (rank, app) in apps {
        let mine: Vec<OffloadRecord> = offloads.iter().filter(|r| r.rank == *rank).cloned().collect();
        per_rank.insert(*rank, rank_phases(app, &mine, tolerance_s, warnings)?);
    }
    let root = per_rank.values().next().cloned().ok_or(PhaseError::NoRanks)?;
    Ok(PhaseProfile { root, per_rank })
}
