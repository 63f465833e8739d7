// Shared tokens of the line grammars: `[HH:MM:SS]` stamps, TFS values,
// `key=value` pairs and `[rank]` prefixes. Samplers and the synthetic
// generator format through the same functions the parsers accept.

use crate::model::{TimeAnchor, WallClock};

use super::ParseError;

pub fn format_anchor(a: &TimeAnchor) -> String {
    format!("[{}] {:.3}", a.wall_clock, a.tfs)
}

pub(crate) fn malformed(line: usize, what: &'static str, token: &str) -> ParseError {
    ParseError::Malformed {
        line,
        what,
        token: token.to_string(),
    }
}

pub(crate) fn parse_wall_clock(line: usize, tok: &str) -> Result<WallClock, ParseError> {
    let inner = tok
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| malformed(line, "wall clock", tok))?;
    let mut parts = inner.split(':');
    let mut next = || -> Option<u8> {
        let p = parts.next()?;
        if p.len() != 2 || !p.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        p.parse().ok()
    };
    let (h, m, s) = (next(), next(), next());
    match (h, m, s, parts.next()) {
        (Some(h), Some(m), Some(s), None) => WallClock::new(h, m, s).ok_or_else(|| malformed(line, "wall clock", tok)),
        _ => Err(malformed(line, "wall clock", tok)),
    }
}

pub(crate) fn parse_tfs(line: usize, tok: &str) -> Result<f64, ParseError> {
    match tok.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 && !tok.starts_with('+') => Ok(v),
        _ => Err(malformed(line, "tfs", tok)),
    }
}

pub(crate) fn parse_anchor(line: usize, wall: Option<&str>, tfs: Option<&str>) -> Result<TimeAnchor, ParseError> {
    let wall = wall.ok_or_else(|| malformed(line, "wall clock", ""))?;
    let tfs = tfs.ok_or_else(|| malformed(line, "tfs", ""))?;
    Ok(TimeAnchor::new(parse_wall_clock(line, wall)?, parse_tfs(line, tfs)?))
}

pub(crate) fn parse_watts(line: usize, tok: &str) -> Result<f64, ParseError> {
    let (_, v) = tok.split_once('=').unwrap_or(("", tok));
    match v.parse::<f64>() {
        Ok(w) if w.is_finite() && w >= 0.0 => Ok(w),
        _ => Err(malformed(line, "watts", tok)),
    }
}

/// Parses a leading `[<rank>]` prefix, returning the rank and the rest.
pub(crate) fn split_rank(text: &str) -> Option<(u32, &str)> {
    let rest = text.strip_prefix('[')?;
    let (num, rest) = rest.split_once(']')?;
    let rank = num.trim().parse().ok()?;
    Some((rank, rest.trim_start()))
}

/// True for blank lines and `#` comment/header lines in sampler logs.
pub(crate) fn is_skippable(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || t.starts_with('#')
}
