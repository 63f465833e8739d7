//! Host sampler log: one line per sample,
//! `[HH:MM:SS] <tfs> core=<W> dram=<W> <NAME>=<int> ...`.

use std::collections::BTreeMap;

use crate::model::{HostPowerSample, PerfSample};

use super::grammar::{format_anchor, is_skippable, malformed, parse_anchor, parse_watts};
use super::{check_monotonic, ParseError};

pub fn parse_host_sampler(text: &str) -> Result<Vec<(HostPowerSample, PerfSample)>, ParseError> {
    let mut out: Vec<(HostPowerSample, PerfSample)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if is_skippable(raw) {
            continue;
        }
        let mut toks = raw.split_whitespace();
        let anchor = parse_anchor(line, toks.next(), toks.next())?;
        let mut core = None;
        let mut dram = None;
        let mut counters = BTreeMap::new();
        for tok in toks {
            let (key, value) = tok.split_once('=').ok_or_else(|| malformed(line, "key=value", tok))?;
            match key {
                "core" | "dram" => {
                    let slot = if key == "core" { &mut core } else { &mut dram };
                    if slot.replace(parse_watts(line, tok)?).is_some() {
                        return Err(malformed(line, "duplicate field", tok));
                    }
                }
                "" => return Err(malformed(line, "counter name", tok)),
                name => {
                    let delta: i64 = value
                        .parse()
                        .ok()
                        .filter(|d| *d >= 0)
                        .ok_or_else(|| malformed(line, "counter delta", tok))?;
                    if counters.insert(name.to_string(), delta).is_some() {
                        return Err(malformed(line, "duplicate counter", tok));
                    }
                }
            }
        }
        let core = core.ok_or_else(|| ParseError::MissingField {
            line,
            field: "core".into(),
        })?;
        let dram = dram.ok_or_else(|| ParseError::MissingField {
            line,
            field: "dram".into(),
        })?;
        if let Some((prev, _)) = out.last() {
            check_monotonic(line, &prev.anchor, &anchor)?;
        }
        out.push((HostPowerSample::new(anchor, core, dram), PerfSample { anchor, counters }));
    }
    Ok(out)
}

/// Canonical line for one host sample. Counters are written in name order.
pub fn format_host_line(power: &HostPowerSample, perf: &PerfSample) -> String {
    let mut s = format!(
        "{} core={} dram={}",
        format_anchor(&power.anchor),
        power.core_watts,
        power.dram_watts
    );
    for (name, delta) in &perf.counters {
        s.push_str(&format!(" {name}={delta}"));
    }
    s
}
