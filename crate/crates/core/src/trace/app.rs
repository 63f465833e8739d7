//! Application timing output. Recognised lines:
//!
//! ```text
//! [<rank>] TIMER <name> <seconds>
//! [<rank>] EVENT <name> [HH:MM:SS] <tfs>
//! ```
//!
//! Anything else (the application's ordinary output) is ignored.

use std::collections::BTreeMap;

use crate::model::{AppTimeline, REQUIRED_TIMERS};

use super::grammar::{format_anchor, malformed, parse_anchor, split_rank};
use super::ParseError;

pub fn parse_app_output(text: &str) -> Result<BTreeMap<u32, AppTimeline>, ParseError> {
    let mut out: BTreeMap<u32, AppTimeline> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let Some((rank, rest)) = split_rank(raw.trim_start()) else {
            continue;
        };
        let mut toks = rest.split_whitespace();
        let kind = toks.next();
        if kind != Some("TIMER") && kind != Some("EVENT") {
            continue;
        }
        let tl = out.entry(rank).or_insert_with(|| AppTimeline {
            rank,
            named_timers: BTreeMap::new(),
            event_anchors: Vec::new(),
        });
        let name = toks.next().ok_or_else(|| malformed(line, "name", raw.trim()))?;
        if kind == Some("TIMER") {
            let tok = toks.next().unwrap_or("");
            let secs = tok
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| malformed(line, "timer seconds", tok))?;
            if let Some(extra) = toks.next() {
                return Err(malformed(line, "end of line", extra));
            }
            if tl.named_timers.insert(name.to_string(), secs).is_some() {
                return Err(malformed(line, "duplicate timer", name));
            }
        } else {
            let anchor = parse_anchor(line, toks.next(), toks.next())?;
            if let Some(extra) = toks.next() {
                return Err(malformed(line, "end of line", extra));
            }
            if let Some((_, prev)) = tl.event_anchors.last() {
                if anchor.tfs < prev.tfs {
                    return Err(ParseError::NonMonotonic {
                        line,
                        previous: *prev,
                        current: anchor,
                    });
                }
            }
            tl.event_anchors.push((name.to_string(), anchor));
        }
    }
    for (rank, tl) in &out {
        if let Some(missing) = REQUIRED_TIMERS.iter().find(|t| !tl.named_timers.contains_key(**t)) {
            return Err(ParseError::MissingTimer {
                rank: *rank,
                timer: missing.to_string(),
            });
        }
    }
    Ok(out)
}

/// Canonical text for one rank: timers (name order), then events in order.
pub fn format_app_timeline(tl: &AppTimeline) -> Vec<String> {
    let mut lines: Vec<String> = tl
        .named_timers
        .iter()
        .map(|(name, secs)| format!("[{}] TIMER {name} {secs:.6}", tl.rank))
        .collect();
    lines.extend(
        tl.event_anchors
            .iter()
            .map(|(name, a)| format!("[{}] EVENT {name} {}", tl.rank, format_anchor(a))),
    );
    lines
}

#[cfg(test)]
mod tests {
    use super::*;

    const RANK0: &str = "\
CoMD version 1.1
[0] EVENT start [13:05:00] 0.000
[0] TIMER position 10.000000
[0] TIMER velocity 5.000000
[0] TIMER redistribute 30.000000
[0] TIMER force 60.000000
[0] TIMER halo_exchange 14.200000
[0] TIMER reduce 1.100000
[0] TIMER inner_transfer 12.000000
[0] TIMER loop 120.500000
[0] EVENT end [13:07:01] 120.600
";

    #[test]
    fn timers_verbatim() {
        let m = parse_app_output(RANK0).unwrap();
        let tl = &m[&0];
        assert_eq!(tl.timer("loop"), Some(120.5));
        assert_eq!(tl.timer("inner_transfer"), Some(12.0));
        assert_eq!(tl.event_anchors.len(), 2);
        assert_eq!(tl.event_anchors[1].0, "end");
        assert_eq!(tl.event_anchors[1].1.tfs, 120.6);
    }

    #[test]
    fn missing_reduce() {
        let text: String = RANK0.lines().filter(|l| !l.contains("reduce")).map(|l| format!("{l}\n")).collect();
        assert_eq!(parse_app_output(&text).unwrap_err().to_string(), "rank 0 missing timer reduce");
    }

    #[test]
    fn two_ranks_partition() {
        let text = format!("{RANK0}{}", RANK0.replace("[0]", "[1]"));
        let m = parse_app_output(&text).unwrap();
        assert_eq!(m.keys().copied().collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(m[&1].rank, 1);
    }

    #[test]
    fn bad_timer_value() {
        let err = parse_app_output("[0] TIMER loop abc\n").unwrap_err();
        assert!(matches!(err, ParseError::Malformed { line: 1, .. }));
    }

    #[test]
    fn format_round_trips() {
        let m = parse_app_output(RANK0).unwrap();
        let text: String = format_app_timeline(&m[&0]).into_iter().map(|l| l + "\n").collect();
        assert_eq!(parse_app_output(&text).unwrap(), m);
    }
}
