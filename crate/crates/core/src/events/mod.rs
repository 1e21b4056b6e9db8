//! Event data model, temporal binning and exposure windows.
//!
//! Timestamps are integer microseconds throughout; nothing in this module
//! touches floating point time.

mod codec;

pub use codec::{parse_event_stream, serialize_event_stream, StreamFormat};

use std::cmp::Ordering;

use thiserror::Error;

use crate::par;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EventError {
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("event ({x}, {y}) outside sensor geometry {width}x{height}")]
    GeometryViolation { x: u32, y: u32, width: u32, height: u32 },
    #[error("header t_end {t_end} precedes t_start {t_start}")]
    NonMonotonicHeader { t_start: u64, t_end: u64 },
    #[error("event timestamp {t} outside stream span [{t_start}, {t_end}]")]
    TimestampOutOfRange { t: u64, t_start: u64, t_end: u64 },
    #[error("timeline has no query times")]
    EmptyTimeline,
    #[error("invalid timeline: {0}")]
    InvalidTimeline(String),
    #[error("malformed binary stream: {0}")]
    MalformedBinary(String),
}

/// Sign of the brightness change that triggered an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn from_i8(p: i8) -> Option<Self> {
        match p {
            -1 => Some(Polarity::Negative),
            1 => Some(Polarity::Positive),
            _ => None,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Polarity::Negative => -1,
            Polarity::Positive => 1,
        }
    }

    pub fn sign(self) -> f64 {
        f64::from(self.as_i8())
    }

    pub fn flip(self) -> Self {
        match self {
            Polarity::Negative => Polarity::Positive,
            Polarity::Positive => Polarity::Negative,
        }
    }
}

/// A single polarity spike at pixel `(x, y)` and time `t` (µs).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: Polarity) -> Self {
        Self { t, x, y, p }
    }

    fn key(&self) -> (u64, u16, u16, Polarity) {
        (self.t, self.y, self.x, self.p)
    }
}

// Canonical order: (t, y, x, p).
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A canonically sorted event sequence with its sensor geometry and span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    events: Vec<Event>,
    width: u32,
    height: u32,
    t_start: u64,
    t_end: u64,
}

impl EventStream {
    /// Validates geometry and span, then sorts into canonical order.
    pub fn new(width: u32, height: u32, t_start: u64, t_end: u64, mut events: Vec<Event>) -> Result<Self, EventError> {
        if t_end < t_start {
            return Err(EventError::NonMonotonicHeader { t_start, t_end });
        }
        for e in &events {
            check_geometry(e, width, height)?;
            if e.t < t_start || e.t > t_end {
                return Err(EventError::TimestampOutOfRange { t: e.t, t_start, t_end });
            }
        }
        par::sort_unstable(&mut events);
        Ok(Self {
            events,
            width,
            height,
            t_start,
            t_end,
        })
    }

    pub fn empty(width: u32, height: u32, t_start: u64, t_end: u64) -> Result<Self, EventError> {
        Self::new(width, height, t_start, t_end, Vec::new())
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn t_start(&self) -> u64 {
        self.t_start
    }

    pub fn t_end(&self) -> u64 {
        self.t_end
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events with `lo < t <= hi`, located by binary search.
    pub fn slice_half_open(&self, lo: u64, hi: u64) -> &[Event] {
        let a = self.events.partition_point(|e| e.t <= lo);
        let b = self.events.partition_point(|e| e.t <= hi);
        &self.events[a..b.max(a)]
    }
}

pub(crate) fn check_geometry(e: &Event, width: u32, height: u32) -> Result<(), EventError> {
    if u32::from(e.x) >= width || u32::from(e.y) >= height {
        return Err(EventError::GeometryViolation {
            x: e.x.into(),
            y: e.y.into(),
            width,
            height,
        });
    }
    Ok(())
}

/// Events belonging to the right-closed interval `(bin_start, bin_end]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventBatch {
    pub events: Vec<Event>,
    pub bin_start: u64,
    pub bin_end: u64,
}

impl EventBatch {
    pub fn new(bin_start: u64, bin_end: u64, events: Vec<Event>) -> Self {
        Self {
            events,
            bin_start,
            bin_end,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn duration(&self) -> u64 {
        self.bin_end - self.bin_start
    }

    /// Signed event mass `Σ p`.
    pub fn net_polarity(&self) -> i64 {
        self.events.iter().map(|e| i64::from(e.p.as_i8())).sum()
    }
}

/// Frame arrival times, tracker query times and the exposure length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Timeline {
    frame_times: Vec<u64>,
    query_times: Vec<u64>,
    exposure_us: u64,
}

impl Timeline {
    pub fn new(frame_times: Vec<u64>, query_times: Vec<u64>, exposure_us: u64) -> Result<Self, EventError> {
        if query_times.is_empty() {
            return Err(EventError::EmptyTimeline);
        }
        if exposure_us == 0 {
            return Err(EventError::InvalidTimeline("exposure must be positive".into()));
        }
        if query_times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EventError::InvalidTimeline(
                "query times must be strictly ascending".into(),
            ));
        }
        if frame_times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EventError::InvalidTimeline(
                "frame times must be strictly ascending".into(),
            ));
        }
        if frame_times.len() > query_times.len() {
            return Err(EventError::InvalidTimeline("frame rate exceeds query rate".into()));
        }
        if let Some(t) = frame_times.iter().find(|t| query_times.binary_search(t).is_err()) {
            return Err(EventError::InvalidTimeline(format!(
                "frame time {t} is not on the query grid"
            )));
        }
        Ok(Self {
            frame_times,
            query_times,
            exposure_us,
        })
    }

    /// Uniform query grid at `query_rate_hz` over `duration_us`, with a frame on
    /// every `query_rate_hz / frame_rate_hz`-th query step.
    ///
    /// Query step `k` lands at `t_start + round(k * 1e6 / query_rate_hz)`; the
    /// rate ratio must be an integer so frames fall on the grid.
    pub fn uniform(
        t_start: u64,
        duration_us: u64,
        query_rate_hz: f64,
        frame_rate_hz: f64,
        exposure_us: u64,
    ) -> Result<Self, EventError> {
        if !(query_rate_hz > 0.0 && frame_rate_hz > 0.0) {
            return Err(EventError::InvalidTimeline("rates must be positive".into()));
        }
        let ratio = query_rate_hz / frame_rate_hz;
        let stride = ratio.round();
        if stride < 1.0 || (ratio - stride).abs() > 1e-9 * ratio {
            return Err(EventError::InvalidTimeline(format!(
                "query rate {query_rate_hz} Hz is not an integer multiple of frame rate {frame_rate_hz} Hz"
            )));
        }
        let stride = stride as usize;
        let steps = (duration_us as f64 * query_rate_hz / 1e6).round() as usize;
        if steps == 0 {
            return Err(EventError::EmptyTimeline);
        }
        let period = 1e6 / query_rate_hz;
        let query_times: Vec<u64> = (0..steps)
            .map(|k| t_start + (k as f64 * period).round() as u64)
            .collect();
        let frame_times = query_times.iter().copied().step_by(stride).collect();
        Self::new(frame_times, query_times, exposure_us)
    }

    pub fn frame_times(&self) -> &[u64] {
        &self.frame_times
    }

    pub fn query_times(&self) -> &[u64] {
        &self.query_times
    }

    pub fn exposure_us(&self) -> u64 {
        self.exposure_us
    }

    pub fn is_frame_time(&self, t: u64) -> bool {
        self.frame_times.binary_search(&t).is_ok()
    }

    pub fn steps(&self) -> usize {
        self.query_times.len()
    }
}

/// Splits `stream` into one batch per query step.
///
/// Batch `k` holds events with `τ_{k-1} < t <= τ_k`; the first batch uses the
/// stream's `t_start` as its left edge.
pub fn bin_events(stream: &EventStream, timeline: &Timeline) -> Result<Vec<EventBatch>, EventError> {
    let q = timeline.query_times();
    if q.is_empty() {
        return Err(EventError::EmptyTimeline);
    }
    if q[0] < stream.t_start() || q[q.len() - 1] > stream.t_end() {
        return Err(EventError::InvalidTimeline(format!(
            "query times [{}, {}] outside stream span [{}, {}]",
            q[0],
            q[q.len() - 1],
            stream.t_start(),
            stream.t_end()
        )));
    }
    Ok(par::map_range(q.len(), |k| {
        let lo = if k == 0 { stream.t_start() } else { q[k - 1] };
        EventBatch::new(lo, q[k], stream.slice_half_open(lo, q[k]).to_vec())
    }))
}

/// Events inside the exposure window `(frame_time - δ, frame_time]`.
///
/// When δ exceeds `frame_time` the window is saturated: every event with
/// `t <= frame_time` is included and `bin_start` is clamped to 0.
pub fn exposure_window_events(stream: &EventStream, frame_time: u64, exposure_us: u64) -> EventBatch {
    let hi = stream.events().partition_point(|e| e.t <= frame_time);
    let (lo, bin_start) = match frame_time.checked_sub(exposure_us) {
        Some(start) => (stream.events().partition_point(|e| e.t <= start), start),
        None => (0, 0),
    };
    EventBatch::new(bin_start, frame_time, stream.events()[lo..hi.max(lo)].to_vec())
}
