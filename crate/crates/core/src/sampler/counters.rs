//! System-wide hardware counters, one per CPU, summed over the package.

use perf_event::events::Hardware;
use perf_event::{Builder, Counter};

use super::SamplerError;

/// Generic hardware event standing in for a micro-architecture counter name.
pub fn generic_event(name: &str) -> Option<Hardware> {
    let upper = name.to_ascii_uppercase();
    if upper.contains("LLC_MISS") || upper.contains("L3_MISS") || upper.contains("CACHE_MISS") {
        Some(Hardware::CACHE_MISSES)
    } else if upper.contains("UNHALTED") || upper.contains("CYCLES") {
        Some(Hardware::CPU_CYCLES)
    } else if upper.contains("INSTRUCTIONS") {
        Some(Hardware::INSTRUCTIONS)
    } else {
        None
    }
}

pub struct PackageCounters {
    names: Vec<String>,
    /// Per name, one counter per CPU.
    counters: Vec<Vec<Counter>>,
    last: Vec<u64>,
}

impl PackageCounters {
    pub fn open(names: &[String]) -> Result<Self, SamplerError> {
        let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
        let mut counters = Vec::with_capacity(names.len());
        for name in names {
            let event = generic_event(name)
                .ok_or_else(|| SamplerError::Counters(format!("no generic event for counter {name}")))?;
            let mut per_cpu = Vec::with_capacity(cpus);
            for cpu in 0..cpus {
                let mut c = Builder::new()
                    .kind(event.clone())
                    .one_cpu(cpu)
                    .any_pid()
                    .build()
                    .map_err(|e| SamplerError::Counters(format!("{name} on cpu {cpu}: {e}")))?;
                c.enable().map_err(|e| SamplerError::Counters(format!("{name}: {e}")))?;
                per_cpu.push(c);
            }
            counters.push(per_cpu);
        }
        let mut pc = Self {
            names: names.to_vec(),
            counters,
            last: vec![0; names.len()],
        };
        pc.last = pc.totals()?;
        Ok(pc)
    }

    fn totals(&mut self) -> Result<Vec<u64>, SamplerError> {
        self.counters
            .iter_mut()
            .map(|per_cpu| {
                per_cpu.iter_mut().try_fold(0u64, |acc, c| {
                    c.read().map(|v| acc + v).map_err(|e| SamplerError::Counters(e.to_string()))
                })
            })
            .collect()
    }

    /// `(name, delta since previous call)` per configured counter.
    pub fn deltas(&mut self) -> Result<Vec<(String, i64)>, SamplerError> {
        let now = self.totals()?;
        let out = self
            .names
            .iter()
            .zip(now.iter().zip(&self.last))
            .map(|(n, (a, b))| (n.clone(), a.saturating_sub(*b) as i64))
            .collect();
        self.last = now;
        Ok(out)
    }
}
