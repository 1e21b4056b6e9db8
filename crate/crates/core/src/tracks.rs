//! Per-query trajectories on a shared time grid, and their text format.
//!
//! File layout: a `# queries=Q steps=T` header, then one line per step
//! `t_us,q0x,q0y,q0v,q1x,q1y,q1v,...`. Coordinates are written with 9
//! significant digits; visibility is `0` or `1`.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TrackError {
    #[error("track {track} has {found} steps, time grid has {expected}")]
    LengthMismatch {
        track: usize,
        found: usize,
        expected: usize,
    },
    #[error("track times must be strictly increasing")]
    NonIncreasingTimes,
    #[error("malformed track file at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl TrackPoint {
    pub fn new(x: f64, y: f64, visible: bool) -> Self {
        Self { x, y, visible }
    }

    pub fn distance(&self, other: &TrackPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// `tracks[q][k]` is query `q` at `times[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    times: Vec<u64>,
    tracks: Vec<Vec<TrackPoint>>,
}

impl TrackSet {
    pub fn new(times: Vec<u64>, tracks: Vec<Vec<TrackPoint>>) -> Result<Self, TrackError> {
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TrackError::NonIncreasingTimes);
        }
        for (q, tr) in tracks.iter().enumerate() {
            if tr.len() != times.len() {
                return Err(TrackError::LengthMismatch {
                    track: q,
                    found: tr.len(),
                    expected: times.len(),
                });
            }
        }
        Ok(Self { times, tracks })
    }

    pub fn times(&self) -> &[u64] {
        &self.times
    }

    pub fn tracks(&self) -> &[Vec<TrackPoint>] {
        &self.tracks
    }

    pub fn track(&self, q: usize) -> &[TrackPoint] {
        &self.tracks[q]
    }

    pub fn num_queries(&self) -> usize {
        self.tracks.len()
    }

    pub fn num_steps(&self) -> usize {
        self.times.len()
    }

    /// Reorders queries; `order[i]` is the source index of output query `i`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            times: self.times.clone(),
            tracks: order.iter().map(|&i| self.tracks[i].clone()).collect(),
        }
    }

    pub fn with_track(&self, q: usize, track: Vec<TrackPoint>) -> Result<Self, TrackError> {
        let mut tracks = self.tracks.clone();
        tracks[q] = track;
        Self::new(self.times.clone(), tracks)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# queries={} steps={}", self.num_queries(), self.num_steps());
        for (k, t) in self.times.iter().enumerate() {
            out.push_str(&t.to_string());
            for tr in &self.tracks {
                let p = tr[k];
                let _ = write!(
                    out,
                    ",{},{},{}",
                    format_sig9(p.x),
                    format_sig9(p.y),
                    u8::from(p.visible)
                );
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TrackError> {
        let bad = |line: usize, reason: String| TrackError::Malformed { line, reason };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
        let header = header
            .strip_prefix('#')
            .ok_or_else(|| bad(1, "header must start with `#`".into()))?;
        let mut queries = None;
        let mut steps = None;
        for tok in header.split_whitespace() {
            if let Some((k, v)) = tok.split_once('=') {
                let n = v
                    .parse::<usize>()
                    .map_err(|_| bad(1, format!("bad header value `{tok}`")))?;
                match k {
                    "queries" => queries = Some(n),
                    "steps" => steps = Some(n),
                    _ => {}
                }
            }
        }
        let queries = queries.ok_or_else(|| bad(1, "header missing `queries`".into()))?;
        let steps = steps.ok_or_else(|| bad(1, "header missing `steps`".into()))?;
        let mut times = Vec::with_capacity(steps);
        let mut tracks = vec![Vec::with_capacity(steps); queries];
        for (idx, line) in lines {
            let lineno = idx + 1;
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != 1 + 3 * queries {
                return Err(bad(
                    lineno,
                    format!("expected {} fields, found {}", 1 + 3 * queries, fields.len()),
                ));
            }
            times.push(
                fields[0]
                    .parse::<u64>()
                    .map_err(|_| bad(lineno, format!("bad time `{}`", fields[0])))?,
            );
            for (q, track) in tracks.iter_mut().enumerate() {
                let f = |i: usize| {
                    fields[1 + 3 * q + i]
                        .parse::<f64>()
                        .map_err(|_| bad(lineno, format!("bad number `{}`", fields[1 + 3 * q + i])))
                };
                let (x, y, v) = (f(0)?, f(1)?, f(2)?);
                if v != 0.0 && v != 1.0 {
                    return Err(bad(lineno, format!("visibility must be 0 or 1, found {v}")));
                }
                track.push(TrackPoint::new(x, y, v == 1.0));
            }
        }
        if times.len() != steps {
            return Err(bad(1, format!("header declares {steps} steps, found {}", times.len())));
        }
        Self::new(times, tracks)
    }
}

/// `%.9g`-style formatting: 9 significant digits, trailing zeros trimmed,
/// scientific notation outside `[1e-5, 1e9)`.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let sci = format!("{v:.8e}");
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..9).contains(&exp) {
        let mant = trim_zeros(mant);
        return format!("{mant}e{exp}");
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(10.0), "10");
        assert_eq!(format_sig9(12.3456789012), "12.3456789");
        assert_eq!(format_sig9(-0.5), "-0.5");
        assert_eq!(format_sig9(1.0e-7), "1e-7");
        assert_eq!(format_sig9(123456789012.0), "1.23456789e11");
    }

    #[test]
    fn text_layout() {
        let ts = TrackSet::new(
            vec![0, 20833],
            vec![vec![
                TrackPoint::new(10.0, 12.5, true),
                TrackPoint::new(10.5, 12.5, false),
            ]],
        )
        .unwrap();
        assert_eq!(ts.to_text(), "# queries=1 steps=2\n0,10,12.5,1\n20833,10.5,12.5,0\n");
    }

    #[test]
    fn malformed_files_rejected() {
        assert!(TrackSet::from_text("").is_err());
        assert!(TrackSet::from_text("# queries=1 steps=1\n0,1,2\n").is_err());
        assert!(TrackSet::from_text("# queries=1 steps=2\n0,1,2,1\n").is_err());
        assert!(TrackSet::from_text("# queries=1 steps=1\n0,1,2,0.5\n").is_err());
    }

    proptest! {
        #[test]
        fn text_round_trip_to_nine_digits(
            pts in proptest::collection::vec((-1e4f64..1e4, -1e4f64..1e4, any::<bool>()), 1..20)
        ) {
            let times: Vec<u64> = (0..pts.len() as u64).map(|k| k * 1000 + 7).collect();
            let track: Vec<TrackPoint> = pts.iter().map(|&(x, y, v)| TrackPoint::new(x, y, v)).collect();
            let ts = TrackSet::new(times, vec![track.clone(), track]).unwrap();
            let back = TrackSet::from_text(&ts.to_text()).unwrap();
            prop_assert_eq!(back.times(), ts.times());
            for (a, b) in back.tracks().iter().flatten().zip(ts.tracks().iter().flatten()) {
                prop_assert_eq!(a.visible, b.visible);
                prop_assert!((a.x - b.x).abs() <= 1e-8 * b.x.abs().max(1e-3));
                prop_assert!((a.y - b.y).abs() <= 1e-8 * b.y.abs().max(1e-3));
            }
        }
    }
}
