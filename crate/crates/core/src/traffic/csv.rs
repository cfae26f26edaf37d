use std::fs;
use std::path::Path;

use super::trace::{PacketRecord, Trace};
use crate::error::{Error, Result};

/// Reads a `timestamp_us,size_bytes` trace from a file. See [`parse_csv_trace`].
pub fn ingest_csv(path: impl AsRef<Path>, site_label: u16, env_id: u16) -> Result<Trace> {
    let path = path.as_ref();
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_csv_trace(&text, site_label, env_id, "")
}

/// Parses CSV trace text. A leading header row is skipped when its first
/// field is not numeric, blank lines are ignored and LF or CRLF endings are
/// accepted. Timestamps are rounded to whole microseconds. Error line
/// numbers count physical lines from 1.
pub fn parse_csv_trace(text: &[u8], site_label: u16, env_id: u16, epoch_tag: &str) -> Result<Trace> {
    let text = std::str::from_utf8(text).map_err(|e| Error::Parse {
        line: 1 + text[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() as u64,
        message: "invalid UTF-8".into(),
    })?;
    let mut packets = Vec::new();
    let mut first = true;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx as u64 + 1;
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        let is_first = std::mem::take(&mut first);
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                line,
                message: format!("expected 2 fields, found {}", fields.len()),
            });
        }
        let ts = fields[0].parse::<f64>();
        if is_first && ts.is_err() {
            continue;
        }
        let ts = ts.ok().filter(|t| t.is_finite()).ok_or_else(|| Error::Parse {
            line,
            message: format!("bad timestamp {:?}", fields[0]),
        })?;
        let size = fields[1].parse::<u32>().map_err(|_| Error::Parse {
            line,
            message: format!("bad size {:?}", fields[1]),
        })?;
        packets.push(PacketRecord::new(ts.round(), size));
    }
    Trace::new(packets, site_label, env_id, epoch_tag)
}

/// Renders a trace as `timestamp_us,size_bytes` rows under a header line;
/// [`parse_csv_trace`] reads it back unchanged.
pub fn format_csv_trace(trace: &Trace) -> String {
    let mut out = String::with_capacity(16 * trace.len() + 24);
    out.push_str("timestamp_us,size_bytes\n");
    for p in trace.packets() {
        out.push_str(&format!("{},{}\n", p.timestamp_us, p.size));
    }
    out
}
