//! csv and evbin stream codecs.
//!
//! csv: `# width=W height=H t_start=A t_end=B` header, then `t,x,y,p` per line.
//! evbin: `EVB1`, u32 width, u32 height, u64 t_start, u64 t_end, u64 count,
//! then `count` 16-byte records `(u64 t, u16 x, u16 y, i8 p, [0u8; 3])`, all
//! little-endian.

use std::fmt::Write as _;
use std::str::FromStr;

use super::{check_geometry, Event, EventError, EventStream, Polarity};

pub const EVBIN_MAGIC: &[u8; 4] = b"EVB1";
const EVBIN_HEADER_LEN: usize = 4 + 4 + 4 + 8 + 8 + 8;
const EVBIN_RECORD_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamFormat {
    Csv,
    Evbin,
}

impl FromStr for StreamFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(StreamFormat::Csv),
            "evbin" => Ok(StreamFormat::Evbin),
            other => Err(format!("unknown stream format `{other}` (expected csv or evbin)")),
        }
    }
}

impl StreamFormat {
    pub fn extension(self) -> &'static str {
        match self {
            StreamFormat::Csv => "csv",
            StreamFormat::Evbin => "evbin",
        }
    }
}

pub fn parse_event_stream(source: &[u8], format: StreamFormat) -> Result<EventStream, EventError> {
    match format {
        StreamFormat::Csv => parse_csv(source),
        StreamFormat::Evbin => parse_evbin(source),
    }
}

pub fn serialize_event_stream(stream: &EventStream, format: StreamFormat) -> Vec<u8> {
    match format {
        StreamFormat::Csv => write_csv(stream),
        StreamFormat::Evbin => write_evbin(stream),
    }
}

fn malformed(line: usize, reason: impl Into<String>) -> EventError {
    EventError::MalformedRecord {
        line,
        reason: reason.into(),
    }
}

fn parse_csv(source: &[u8]) -> Result<EventStream, EventError> {
    let text = std::str::from_utf8(source).map_err(|e| malformed(0, format!("not UTF-8: {e}")))?;
    let (mut width, mut height, mut t_start, mut t_end) = (None, None, None, None);
    let mut events = Vec::new();
    for (idx, raw) in text.split('\n').enumerate() {
        let lineno = idx + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw).trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('#') {
            for tok in header.split_whitespace() {
                let Some((k, v)) = tok.split_once('=') else {
                    continue;
                };
                let num = |v: &str| {
                    v.parse::<u64>()
                        .map_err(|_| malformed(lineno, format!("bad header value `{tok}`")))
                };
                match k {
                    "width" => width = Some(num(v)?),
                    "height" => height = Some(num(v)?),
                    "t_start" => t_start = Some(num(v)?),
                    "t_end" => t_end = Some(num(v)?),
                    _ => {}
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(malformed(lineno, format!("expected 4 fields, found {}", fields.len())));
        }
        let t = fields[0]
            .parse::<u64>()
            .map_err(|_| malformed(lineno, format!("bad timestamp `{}`", fields[0])))?;
        let x = fields[1]
            .parse::<u16>()
            .map_err(|_| malformed(lineno, format!("bad x `{}`", fields[1])))?;
        let y = fields[2]
            .parse::<u16>()
            .map_err(|_| malformed(lineno, format!("bad y `{}`", fields[2])))?;
        let p = fields[3]
            .parse::<i8>()
            .ok()
            .and_then(Polarity::from_i8)
            .ok_or_else(|| malformed(lineno, format!("polarity must be -1 or 1, found `{}`", fields[3])))?;
        events.push(Event::new(t, x, y, p));
    }
    let missing = |name: &str| malformed(1, format!("header is missing `{name}`"));
    let width = width.ok_or_else(|| missing("width"))?;
    let height = height.ok_or_else(|| missing("height"))?;
    let t_start = t_start.ok_or_else(|| missing("t_start"))?;
    let t_end = t_end.ok_or_else(|| missing("t_end"))?;
    let to_u32 = |v: u64, name: &str| u32::try_from(v).map_err(|_| malformed(1, format!("{name} {v} exceeds u32")));
    EventStream::new(
        to_u32(width, "width")?,
        to_u32(height, "height")?,
        t_start,
        t_end,
        events,
    )
}

fn write_csv(stream: &EventStream) -> Vec<u8> {
    let mut out = String::with_capacity(48 + stream.len() * 20);
    let _ = writeln!(
        out,
        "# width={} height={} t_start={} t_end={}",
        stream.width(),
        stream.height(),
        stream.t_start(),
        stream.t_end()
    );
    for e in stream.events() {
        let _ = writeln!(out, "{},{},{},{}", e.t, e.x, e.y, e.p.as_i8());
    }
    out.into_bytes()
}

fn read_array<const N: usize>(buf: &[u8], at: usize) -> [u8; N] {
    buf[at..at + N].try_into().expect("length checked by caller")
}

fn parse_evbin(source: &[u8]) -> Result<EventStream, EventError> {
    if source.len() < EVBIN_HEADER_LEN {
        return Err(EventError::MalformedBinary(format!(
            "header needs {EVBIN_HEADER_LEN} bytes, found {}",
            source.len()
        )));
    }
    if &source[..4] != EVBIN_MAGIC {
        return Err(EventError::MalformedBinary("bad magic, expected EVB1".into()));
    }
    let width = u32::from_le_bytes(read_array(source, 4));
    let height = u32::from_le_bytes(read_array(source, 8));
    let t_start = u64::from_le_bytes(read_array(source, 12));
    let t_end = u64::from_le_bytes(read_array(source, 20));
    let count = u64::from_le_bytes(read_array(source, 28));
    if t_end < t_start {
        return Err(EventError::NonMonotonicHeader { t_start, t_end });
    }
    let body = &source[EVBIN_HEADER_LEN..];
    let expected = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(EVBIN_RECORD_LEN))
        .ok_or_else(|| EventError::MalformedBinary(format!("record count {count} too large")))?;
    if body.len() != expected {
        return Err(EventError::MalformedBinary(format!(
            "header declares {count} records ({expected} bytes), body has {} bytes",
            body.len()
        )));
    }
    let mut events = Vec::with_capacity(count as usize);
    for (i, rec) in body.chunks_exact(EVBIN_RECORD_LEN).enumerate() {
        let t = u64::from_le_bytes(read_array(rec, 0));
        let x = u16::from_le_bytes(read_array(rec, 8));
        let y = u16::from_le_bytes(read_array(rec, 10));
        let p = Polarity::from_i8(rec[12] as i8).ok_or_else(|| EventError::MalformedRecord {
            line: i,
            reason: format!("polarity byte {} is not -1 or 1", rec[12] as i8),
        })?;
        if rec[13..16] != [0, 0, 0] {
            return Err(EventError::MalformedRecord {
                line: i,
                reason: "non-zero pad bytes".into(),
            });
        }
        let e = Event::new(t, x, y, p);
        check_geometry(&e, width, height)?;
        events.push(e);
    }
    EventStream::new(width, height, t_start, t_end, events)
}

fn write_evbin(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(EVBIN_HEADER_LEN + stream.len() * EVBIN_RECORD_LEN);
    out.extend_from_slice(EVBIN_MAGIC);
    out.extend_from_slice(&stream.width().to_le_bytes());
    out.extend_from_slice(&stream.height().to_le_bytes());
    out.extend_from_slice(&stream.t_start().to_le_bytes());
    out.extend_from_slice(&stream.t_end().to_le_bytes());
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for e in stream.events() {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.p.as_i8() as u8);
        out.extend_from_slice(&[0, 0, 0]);
    }
    out
}
