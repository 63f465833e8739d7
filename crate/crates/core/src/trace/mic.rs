//! MIC sampler log: `[HH:MM:SS] <tfs> pcie=<W> c2x3=<W> c2x4=<W> [win0=<W> win1=<W>]`.

use crate::model::MicPowerSample;

use super::grammar::{format_anchor, is_skippable, malformed, parse_anchor, parse_watts};
use super::{check_monotonic, ParseError};

pub fn parse_mic_sampler(text: &str) -> Result<Vec<MicPowerSample>, ParseError> {
    let mut out: Vec<MicPowerSample> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if is_skippable(raw) {
            continue;
        }
        let mut toks = raw.split_whitespace();
        let anchor = parse_anchor(line, toks.next(), toks.next())?;
        let mut fields: [Option<f64>; 5] = [None; 5];
        for tok in toks {
            let (key, _) = tok.split_once('=').ok_or_else(|| malformed(line, "key=value", tok))?;
            let slot = match key {
                "pcie" => 0,
                "c2x3" => 1,
                "c2x4" => 2,
                "win0" => 3,
                "win1" => 4,
                _ => return Err(malformed(line, "mic field", tok)),
            };
            if fields[slot].replace(parse_watts(line, tok)?).is_some() {
                return Err(malformed(line, "duplicate field", tok));
            }
        }
        let connector = |i: usize, name: &str| {
            fields[i].ok_or_else(|| ParseError::MissingField {
                line,
                field: format!("connector {name}"),
            })
        };
        let mut sample = MicPowerSample::new(anchor, connector(0, "pcie")?, connector(1, "c2x3")?, connector(2, "c2x4")?);
        sample.window0_watts = fields[3];
        sample.window1_watts = fields[4];
        if let Some(prev) = out.last() {
            check_monotonic(line, &prev.anchor, &anchor)?;
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn format_mic_line(s: &MicPowerSample) -> String {
    let mut line = format!(
        "{} pcie={} c2x3={} c2x4={}",
        format_anchor(&s.anchor),
        s.pcie_watts,
        s.c2x3_watts,
        s.c2x4_watts
    );
    if let Some(w) = s.window0_watts {
        line.push_str(&format!(" win0={w}"));
    }
    if let Some(w) = s.window1_watts {
        line.push_str(&format!(" win1={w}"));
    }
    line
}
