//! Offload report (level 2) with MPI rank prefixes:
//! `[<rank>] [Offload] [MIC <dev>] [Tag <n>] [<Field>] <value>(<unit>)`.
//!
//! Lines of different ranks may interleave arbitrarily. Records are keyed by
//! `(rank, tag)`; completeness is judged per record at end of stream, since
//! conditional offloads can leave gaps in a rank's tag sequence.

use std::collections::BTreeMap;

use crate::model::OffloadRecord;

use super::grammar::{malformed, split_rank};
use super::ParseError;

pub const FIELD_CPU_TIME: &str = "CPU Time";
pub const FIELD_MIC_TIME: &str = "MIC Time";
pub const FIELD_TO_DEVICE: &str = "CPU->MIC Data";
pub const FIELD_FROM_DEVICE: &str = "MIC->CPU Data";
const COUNTER_PREFIX: &str = "Counter ";

#[derive(Default)]
struct Partial {
    device: u32,
    first_line: usize,
    cpu: Option<f64>,
    mic: Option<f64>,
    to: Option<u64>,
    from: Option<u64>,
    counters: BTreeMap<String, u64>,
}

/// Pulls the next `[...]` group off the front of `s`.
fn bracket(s: &str) -> Option<(&str, &str)> {
    let rest = s.trim_start().strip_prefix('[')?;
    let (inner, rest) = rest.split_once(']')?;
    Some((inner.trim(), rest))
}

/// Splits `12.5(seconds)` into `("12.5", "seconds")`.
fn value_unit(s: &str) -> Option<(&str, &str)> {
    let s = s.trim();
    let open = s.find('(')?;
    let unit = s[open + 1..].strip_suffix(')')?;
    Some((s[..open].trim(), unit))
}

pub fn parse_offload_report(text: &str) -> Result<Vec<OffloadRecord>, ParseError> {
    let mut partials: BTreeMap<(u32, u64), Partial> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let bad = |what| malformed(line, what, raw.trim());
        let (rank, rest) = split_rank(raw.trim_start()).ok_or_else(|| bad("rank prefix"))?;
        let (kw, rest) = bracket(rest).ok_or_else(|| bad("[Offload]"))?;
        if kw != "Offload" {
            return Err(malformed(line, "[Offload]", kw));
        }
        let (dev, rest) = bracket(rest).ok_or_else(|| bad("[MIC <dev>]"))?;
        let device: u32 = dev
            .strip_prefix("MIC ")
            .and_then(|d| d.trim().parse().ok())
            .ok_or_else(|| malformed(line, "[MIC <dev>]", dev))?;
        let (tag, rest) = bracket(rest).ok_or_else(|| bad("[Tag <n>]"))?;
        let tag: u64 = tag
            .strip_prefix("Tag ")
            .and_then(|t| t.trim().parse().ok())
            .ok_or_else(|| malformed(line, "[Tag <n>]", tag))?;
        let (field, rest) = bracket(rest).ok_or_else(|| bad("[<Field>]"))?;
        let (value, _unit) = value_unit(rest).ok_or_else(|| malformed(line, "<value>(<unit>)", rest.trim()))?;

        let p = partials.entry((rank, tag)).or_insert_with(|| Partial {
            device,
            first_line: line,
            ..Partial::default()
        });
        if p.device != device {
            return Err(ParseError::DuplicateField {
                line,
                rank,
                tag,
                field: format!("MIC {device} (record began on MIC {})", p.device),
            });
        }
        let dup = || ParseError::DuplicateField {
            line,
            rank,
            tag,
            field: field.to_string(),
        };
        let seconds = || -> Result<f64, ParseError> {
            value
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| malformed(line, "seconds", value))
        };
        let count = || -> Result<u64, ParseError> { value.parse().map_err(|_| malformed(line, "integer", value)) };
        match field {
            FIELD_CPU_TIME => {
                if p.cpu.replace(seconds()?).is_some() {
                    return Err(dup());
                }
            }
            FIELD_MIC_TIME => {
                if p.mic.replace(seconds()?).is_some() {
                    return Err(dup());
                }
            }
            FIELD_TO_DEVICE => {
                if p.to.replace(count()?).is_some() {
                    return Err(dup());
                }
            }
            FIELD_FROM_DEVICE => {
                if p.from.replace(count()?).is_some() {
                    return Err(dup());
                }
            }
            other => {
                let name = other
                    .strip_prefix(COUNTER_PREFIX)
                    .map(str::trim)
                    .filter(|n| !n.is_empty())
                    .ok_or_else(|| malformed(line, "offload field", other))?;
                if p.counters.insert(name.to_string(), count()?).is_some() {
                    return Err(dup());
                }
            }
        }
    }

    let mut incomplete = Vec::new();
    let mut records = Vec::with_capacity(partials.len());
    for ((rank, tag), p) in partials {
        let mut missing = Vec::new();
        if p.cpu.is_none() {
            missing.push(FIELD_CPU_TIME);
        }
        if p.mic.is_none() {
            missing.push(FIELD_MIC_TIME);
        }
        if p.to.is_none() {
            missing.push(FIELD_TO_DEVICE);
        }
        if p.from.is_none() {
            missing.push(FIELD_FROM_DEVICE);
        }
        if !missing.is_empty() {
            incomplete.push(super::IncompleteRecord {
                rank,
                tag,
                first_line: p.first_line,
                missing,
            });
            continue;
        }
        records.push(OffloadRecord {
            rank,
            device_id: p.device,
            tag,
            cpu_time_s: p.cpu.unwrap_or_default(),
            mic_time_s: p.mic.unwrap_or_default(),
            bytes_to_device: p.to.unwrap_or_default(),
            bytes_from_device: p.from.unwrap_or_default(),
            counters: p.counters,
        });
    }
    if !incomplete.is_empty() {
        return Err(ParseError::IncompleteRecords(incomplete));
    }
    Ok(records)
}

/// Canonical lines for one record, in runtime field order.
pub fn format_offload_record(r: &OffloadRecord) -> Vec<String> {
    let prefix = format!("[{}] [Offload] [MIC {}] [Tag {}]", r.rank, r.device_id, r.tag);
    let mut lines = vec![
        format!("{prefix} [{FIELD_CPU_TIME}] {:.6}(seconds)", r.cpu_time_s),
        format!("{prefix} [{FIELD_MIC_TIME}] {:.6}(seconds)", r.mic_time_s),
        format!("{prefix} [{FIELD_TO_DEVICE}] {}(bytes)", r.bytes_to_device),
        format!("{prefix} [{FIELD_FROM_DEVICE}] {}(bytes)", r.bytes_from_device),
    ];
    for (name, v) in &r.counters {
        lines.push(format!("{prefix} [{COUNTER_PREFIX}{name}] {v}(events)"));
    }
    lines
}
