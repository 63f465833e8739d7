//! Memory, bandwidth, vectorization, throughput and work metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{OffloadRecord, PerfSample, Precision};

/// Bytes moved per last-level-cache fill.
pub const CACHE_LINE_BYTES: u64 = 64;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("bandwidth undefined: {0}")]
    UndefinedBandwidth(String),
    #[error("vectorization intensity undefined: zero vector instructions")]
    ZeroInstructions,
    #[error("operations-per-cycle estimate undefined: zero operations")]
    ZeroOperations,
}

/// Hardware counter names, per micro-architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CounterNames {
    pub host_llc_miss: String,
    pub host_unhalted: String,
    pub mic_llc_miss: String,
    pub mic_unhalted: String,
    pub mic_vpu_elements: String,
    pub mic_vpu_instructions: String,
}

impl CounterNames {
    pub fn sandy_bridge() -> Self {
        Self {
            host_llc_miss: "MEM_LOAD_UOPS_MISC_RETIRED:LLC_MISS".into(),
            host_unhalted: "CPU_CLK_UNHALTED:THREAD_P".into(),
            mic_llc_miss: "L2_DATA_READ_MISS_MEM_FILL".into(),
            mic_unhalted: "CPU_CLK_UNHALTED".into(),
            mic_vpu_elements: "VPU_ELEMENTS_ACTIVE".into(),
            mic_vpu_instructions: "VPU_INSTRUCTIONS_EXECUTED".into(),
        }
    }

    pub fn ivy_bridge() -> Self {
        Self {
            host_llc_miss: "MEM_LOAD_UOPS_RETIRED:L3_MISS".into(),
            ..Self::sandy_bridge()
        }
    }
}

impl Default for CounterNames {
    fn default() -> Self {
        Self::sandy_bridge()
    }
}

pub fn memory_bytes(llc_misses: u64) -> u64 {
    memory_bytes_with_line(llc_misses, CACHE_LINE_BYTES)
}

pub fn memory_bytes_with_line(llc_misses: u64, line_bytes: u64) -> u64 {
    llc_misses * line_bytes
}

/// Bytes per second over the unhalted cycles the transfer took.
pub fn bandwidth_bps(mem_bytes: u64, frequency_hz: f64, unhalted_cycles: u64) -> Result<f64, MetricError> {
    if unhalted_cycles == 0 {
        return Err(MetricError::UndefinedBandwidth("zero unhalted cycles".into()));
    }
    Ok(mem_bytes as f64 * frequency_hz / unhalted_cycles as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PciMetrics {
    pub bytes: u64,
    pub bandwidth_bps: f64,
    /// Set when the bandwidth is reported as 0 because nothing moved.
    pub note: Option<String>,
}

pub fn pci_metrics(offloads: &[OffloadRecord], pci_time_s: f64) -> Result<PciMetrics, MetricError> {
    let bytes: u64 = offloads.iter().map(OffloadRecord::bytes_total).sum();
    if bytes == 0 {
        return Ok(PciMetrics {
            bytes,
            bandwidth_bps: 0.0,
            note: Some("no data transferred".into()),
        });
    }
    if pci_time_s <= 0.0 {
        return Err(MetricError::UndefinedBandwidth(format!("{bytes} bytes moved in zero PCI time")));
    }
    Ok(PciMetrics {
        bytes,
        bandwidth_bps: bytes as f64 / pci_time_s,
        note: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VectorIntensity {
    pub value: f64,
    pub within_bounds: bool,
}

/// Active vector elements per vector instruction. Out-of-range values are
/// returned as measured with `within_bounds = false`.
pub fn vectorization_intensity(
    vpu_elements: u64,
    vpu_instructions: u64,
    precision: Precision,
) -> Result<VectorIntensity, MetricError> {
    if vpu_instructions == 0 {
        return Err(MetricError::ZeroInstructions);
    }
    let value = vpu_elements as f64 / vpu_instructions as f64;
    Ok(VectorIntensity {
        value,
        within_bounds: vector_intensity_in_bounds(value, precision),
    })
}

pub fn vector_intensity_in_bounds(value: f64, precision: Precision) -> bool {
    (1.0..=precision.max_vector_intensity()).contains(&value)
}

pub fn throughput_flops(cores: u32, vector_intensity: f64, ops_per_cycle: f64, frequency_hz: f64) -> f64 {
    cores as f64 * vector_intensity * ops_per_cycle * frequency_hz
}

pub fn work_flop(throughput_flops: f64, mic_compute_s: f64) -> f64 {
    throughput_flops * mic_compute_s
}

/// Average operations per cycle when vectorized fused multiply-adds count as
/// two operations and everything else as one.
pub fn ops_per_cycle_estimate(vectorized_fma_ops: u64, other_ops: u64) -> Result<f64, MetricError> {
    let total = vectorized_fma_ops + other_ops;
    if total == 0 {
        return Err(MetricError::ZeroOperations);
    }
    Ok((2 * vectorized_fma_ops + other_ops) as f64 / total as f64)
}

/// Sum of one offload-scoped counter over all records.
pub fn offload_counter_total(offloads: &[OffloadRecord], name: &str) -> u64 {
    offloads.iter().filter_map(|r| r.counters.get(name)).sum()
}

/// `(llc_misses, unhalted_cycles)` summed over host samples.
pub fn host_counter_totals<'a, I>(samples: I, names: &CounterNames) -> (u64, u64)
where
    I: IntoIterator<Item = &'a PerfSample>,
{
    samples.into_iter().fold((0, 0), |(m, c), s| {
        (m + s.counter(&names.host_llc_miss), c + s.counter(&names.host_unhalted))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn rec(to: u64, from: u64, counters: &[(&str, u64)]) -> OffloadRecord {
        OffloadRecord {
            rank: 0,
            device_id: 0,
            tag: 0,
            cpu_time_s: 1.0,
            mic_time_s: 0.5,
            bytes_to_device: to,
            bytes_from_device: from,
            counters: counters.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    #[test]
    fn memory_from_misses() {
        assert_eq!(memory_bytes(1_000_000), 64_000_000);
        assert_eq!(memory_bytes(0), 0);
        let names = CounterNames::default();
        let offloads = [rec(0, 0, &[(&names.mic_llc_miss, 10)]), rec(0, 0, &[(&names.mic_llc_miss, 32)])];
        let per: u64 = offloads.iter().map(|o| memory_bytes(o.counters[&names.mic_llc_miss])).sum();
        assert_eq!(per, memory_bytes(offload_counter_total(&offloads, &names.mic_llc_miss)));
    }

    #[test]
    fn bandwidth_examples() {
        // 64e6 * 2.6e9 / 1.3e9 = 1.28e8
        let bw = bandwidth_bps(64_000_000, 2.6e9, 1_300_000_000).unwrap();
        assert!((bw - 1.28e8).abs() <= 1.28e8 * 1e-15);
        assert_eq!(bandwidth_bps(0, 2.6e9, 5).unwrap(), 0.0);
        let doubled = bandwidth_bps(64_000_000, 5.2e9, 1_300_000_000).unwrap();
        assert_eq!(doubled, 2.0 * bw);
        assert!(matches!(bandwidth_bps(1, 1.0, 0), Err(MetricError::UndefinedBandwidth(_))));
    }

    #[test]
    fn pci_examples() {
        let m = pci_metrics(&[rec(3_000_000_000, 3_000_000_000, &[])], 2.0).unwrap();
        assert_eq!(m.bytes, 6_000_000_000);
        assert_eq!(m.bandwidth_bps, 3e9);
        let none = pci_metrics(&[], 0.0).unwrap();
        assert_eq!((none.bytes, none.bandwidth_bps), (0, 0.0));
        assert!(none.note.is_some());
        assert!(pci_metrics(&[rec(1, 0, &[])], 0.0).is_err());
    }

    #[test]
    fn vectorization_examples() {
        let vi = vectorization_intensity(26, 10, Precision::Double).unwrap();
        assert_eq!(vi.value, 2.6);
        assert!(vi.within_bounds);
        let one = vectorization_intensity(7, 7, Precision::Double).unwrap();
        assert_eq!(one.value, 1.0);
        assert!(one.within_bounds);
        let over = vectorization_intensity(95, 10, Precision::Double).unwrap();
        assert_eq!(over.value, 9.5);
        assert!(!over.within_bounds);
        assert!(vectorization_intensity(95, 10, Precision::Single).unwrap().within_bounds);
        assert_eq!(vectorization_intensity(1, 0, Precision::Single), Err(MetricError::ZeroInstructions));
    }

    #[test]
    fn throughput_and_work() {
        let t = throughput_flops(60, 2.6, 1.15, 1.1e9);
        assert!((t - 1.9734e11).abs() <= 1.9734e11 * 1e-12);
        assert_eq!(throughput_flops(1, 2.6, 1.0, 1.0), 2.6);
        let w = work_flop(t, 100.0);
        assert!((w - 1.9734e13).abs() <= 1.9734e13 * 1e-12);
        assert_eq!(work_flop(t, 0.0), 0.0);
        assert_eq!(work_flop(t, 200.0), 2.0 * w);
    }

    #[test]
    fn ops_per_cycle_examples() {
        assert_eq!(ops_per_cycle_estimate(3, 17).unwrap(), 1.15);
        assert_eq!(ops_per_cycle_estimate(0, 9).unwrap(), 1.0);
        assert_eq!(ops_per_cycle_estimate(9, 0).unwrap(), 2.0);
        assert_eq!(ops_per_cycle_estimate(0, 0), Err(MetricError::ZeroOperations));
    }

    #[test]
    fn host_totals_use_configured_names() {
        let names = CounterNames::ivy_bridge();
        let mk = |m, c| PerfSample {
            anchor: crate::model::TimeAnchor::new(crate::model::WallClock::new(0, 0, 0).unwrap(), 0.0),
            counters: BTreeMap::from([(names.host_llc_miss.clone(), m), (names.host_unhalted.clone(), c), ("OTHER".into(), 5)]),
        };
        assert_eq!(host_counter_totals(&[mk(3, 100), mk(4, 50)], &names), (7, 150));
    }

    proptest! {
        #[test]
        fn metrics_are_homogeneous(misses in 0u64..1_000_000, cycles in 1u64..1_000_000_000, k in 1u64..16) {
            prop_assert_eq!(memory_bytes(k * misses), k * memory_bytes(misses));
            let a = bandwidth_bps(memory_bytes(misses), 1.1e9, cycles).unwrap();
            let b = bandwidth_bps(memory_bytes(k * misses), 1.1e9, cycles).unwrap();
            prop_assert!((b - k as f64 * a).abs() <= 1e-9 * b.max(1.0));
        }

        #[test]
        fn ops_per_cycle_in_unit_interval(fma in 0u64..1000, other in 0u64..1000) {
            prop_assume!(fma + other > 0);
            let v = ops_per_cycle_estimate(fma, other).unwrap();
            prop_assert!((1.0..=2.0).contains(&v));
        }
    }
}
