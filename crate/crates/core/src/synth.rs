//! Analytic scenes and the contrast-threshold event model.
//!
//! Scenes are painted back to front from closed-form object trajectories, so
//! ground truth positions and visibility are exact. Event simulation follows
//! the log-intensity threshold model with linear-in-time interpolation of
//! `L = ln I` between frames, which gives closed-form crossing times.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::events::{Event, EventError, EventStream, Polarity};
use crate::par;
use crate::tracks::{TrackPoint, TrackSet};

/// Default contrast threshold.
pub const DEFAULT_CONTRAST_THRESHOLD: f64 = 0.2;

// Tolerance on the level-crossing test; absorbs the round trip through
// exp/ln when a frame lands exactly on a threshold level.
const CROSSING_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("degenerate scene: {0}")]
    DegenerateScene(String),
    #[error("non-positive intensity {value} in frame {frame}")]
    NonPositiveIntensity { frame: usize, value: f64 },
    #[error("contrast threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("integration window must be positive")]
    EmptyWindow,
    #[error("window [{lo}, {hi}] not covered by stream span [{t_start}, {t_end}]")]
    WindowNotCovered { lo: f64, hi: f64, t_start: u64, t_end: u64 },
    #[error("query time {query} precedes anchor time {anchor}")]
    QueryBeforeAnchor { query: u64, anchor: u64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("time {0} outside the video span")]
    TimeOutOfRange(u64),
    #[error(transparent)]
    Events(#[from] EventError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectShape {
    GaussianBlob,
    TexturedSquare,
}

impl std::str::FromStr for ObjectShape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian_blob" => Ok(ObjectShape::GaussianBlob),
            "textured_square" => Ok(ObjectShape::TexturedSquare),
            other => Err(format!("unknown shape `{other}`")),
        }
    }
}

/// An object moving at constant velocity. Position is in pixels (pixel
/// centers at integer coordinates), velocity in px/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub shape: ObjectShape,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    /// Blob: footprint radius (σ = size/2). Square: side length.
    pub size: f64,
    pub peak: f64,
}

impl SceneObject {
    pub fn position(&self, t_us: u64) -> (f64, f64) {
        let s = t_us as f64 * 1e-6;
        (self.x + self.vx * s, self.y + self.vy * s)
    }

    /// Whether `(px, py)` lies inside the object's occluding footprint when
    /// the object is centered at `(cx, cy)`.
    fn covers(&self, cx: f64, cy: f64, px: f64, py: f64) -> bool {
        match self.shape {
            ObjectShape::GaussianBlob => (px - cx).hypot(py - cy) <= self.size,
            ObjectShape::TexturedSquare => (px - cx).abs() <= self.size / 2.0 && (py - cy).abs() <= self.size / 2.0,
        }
    }

    /// Paints this object over `under` at pixel `(px, py)`.
    fn paint(&self, cx: f64, cy: f64, px: f64, py: f64, under: f64) -> f64 {
        match self.shape {
            ObjectShape::GaussianBlob => {
                let sigma = self.size / 2.0;
                let r2 = (px - cx).powi(2) + (py - cy).powi(2);
                let a = (-r2 / (2.0 * sigma * sigma)).exp();
                under * (1.0 - a) + self.peak * a
            }
            ObjectShape::TexturedSquare => {
                if self.covers(cx, cy, px, py) {
                    let k = std::f64::consts::TAU / self.size.max(1.0);
                    let texture = 0.6 + 0.4 * (k * (px - cx)).sin() * (k * (py - cy)).cos();
                    self.peak * texture
                } else {
                    under
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub duration_us: u64,
    pub fps: f64,
    /// Back to front: later objects occlude earlier ones.
    pub objects: Vec<SceneObject>,
    pub background: f64,
}

impl SceneConfig {
    /// A reproducible scene with `n_objects` random blobs/squares.
    pub fn random(
        seed: u64,
        width: usize,
        height: usize,
        duration_us: u64,
        fps: f64,
        n_objects: usize,
        max_speed: f64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let margin = 6.0_f64.min(width as f64 / 4.0);
        let objects = (0..n_objects)
            .map(|_| SceneObject {
                shape: if rng.random_bool(0.5) {
                    ObjectShape::GaussianBlob
                } else {
                    ObjectShape::TexturedSquare
                },
                x: rng.random_range(margin..width as f64 - margin),
                y: rng.random_range(margin..height as f64 - margin),
                vx: rng.random_range(-max_speed..=max_speed),
                vy: rng.random_range(-max_speed..=max_speed),
                size: rng.random_range(3.0..8.0),
                peak: rng.random_range(0.4..1.0),
            })
            .collect();
        Self {
            width,
            height,
            duration_us,
            fps,
            objects,
            background: rng.random_range(0.15..0.35),
        }
    }

    pub fn frame_times(&self) -> Vec<u64> {
        let n = (self.duration_us as f64 * self.fps / 1e6).round() as usize;
        (0..n).map(|k| (k as f64 * 1e6 / self.fps).round() as u64).collect()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::DegenerateScene(m));
        if self.width == 0 || self.height == 0 {
            return bad("zero-size image".into());
        }
        if self.width > usize::from(u16::MAX) || self.height > usize::from(u16::MAX) {
            return bad("image exceeds u16 event coordinates".into());
        }
        if !(self.fps > 0.0) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if self.frame_times().len() < 2 {
            return bad("fps·duration must give at least 2 frames".into());
        }
        if !(self.background > 0.0) {
            return bad(format!("background intensity {} must be positive", self.background));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !(o.size > 0.0) {
                return bad(format!("object {i} has non-positive size"));
            }
            if !(o.peak > 0.0) {
                return bad(format!("object {i} has non-positive intensity"));
            }
        }
        Ok(())
    }

    pub fn render_frame(&self, t_us: u64) -> Array2<f64> {
        let centers: Vec<(f64, f64)> = self.objects.iter().map(|o| o.position(t_us)).collect();
        let rows = par::map_range(self.height, |r| {
            (0..self.width)
                .map(|c| {
                    let (px, py) = (c as f64, r as f64);
                    self.objects
                        .iter()
                        .zip(&centers)
                        .fold(self.background, |acc, (o, &(cx, cy))| o.paint(cx, cy, px, py, acc))
                })
                .collect::<Vec<f64>>()
        });
        Array2::from_shape_vec((self.height, self.width), rows.concat()).expect("row lengths match")
    }

    /// Exact positions and visibility of every object's center at `times`.
    pub fn ground_truth(&self, times: &[u64]) -> GroundTruth {
        let (w, h) = ((self.width - 1) as f64, (self.height - 1) as f64);
        let tracks = self
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| {
                times
                    .iter()
                    .map(|&t| {
                        let (x, y) = o.position(t);
                        let inside = (0.0..=w).contains(&x) && (0.0..=h).contains(&y);
                        let covered = self.objects[i + 1..].iter().any(|n| {
                            let (nx, ny) = n.position(t);
                            n.covers(nx, ny, x, y)
                        });
                        TrackPoint::new(x, y, inside && !covered)
                    })
                    .collect()
            })
            .collect();
        GroundTruth {
            tracks: TrackSet::new(times.to_vec(), tracks).expect("times come from a valid grid"),
        }
    }
}

/// Linear-intensity video; all values strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityVideo {
    pub frames: Vec<Array2<f64>>,
    pub frame_times: Vec<u64>,
    pub fps: f64,
}

impl IntensityVideo {
    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, |f| f.nrows())
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.ncols())
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.frames.len() < 2 || self.frames.len() != self.frame_times.len() {
            return Err(SynthError::DegenerateScene(
                "video needs at least 2 frames with one time each".into(),
            ));
        }
        if self.frame_times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SynthError::DegenerateScene("frame times must increase".into()));
        }
        let dim = self.frames[0].dim();
        for (i, f) in self.frames.iter().enumerate() {
            if f.dim() != dim {
                return Err(SynthError::ShapeMismatch(format!("frame {i} has shape {:?}", f.dim())));
            }
            if let Some(&v) = f.iter().find(|v| !(**v > 0.0)) {
                return Err(SynthError::NonPositiveIntensity { frame: i, value: v });
            }
        }
        Ok(())
    }

    pub fn log_frame(&self, k: usize) -> Array2<f64> {
        self.frames[k].mapv(f64::ln)
    }

    /// `ln I` at time `t`, interpolated linearly in the log domain.
    pub fn log_frame_at(&self, t: u64) -> Result<Array2<f64>, SynthError> {
        let times = &self.frame_times;
        if times.is_empty() || t < times[0] || t > times[times.len() - 1] {
            return Err(SynthError::TimeOutOfRange(t));
        }
        match times.binary_search(&t) {
            Ok(k) => Ok(self.log_frame(k)),
            Err(k) => {
                let (ta, tb) = (times[k - 1], times[k]);
                let a = (t - ta) as f64 / (tb - ta) as f64;
                Ok(self.log_frame(k - 1) * (1.0 - a) + self.log_frame(k) * a)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub tracks: TrackSet,
}

/// Renders every frame of `config` and samples ground truth at frame times.
pub fn render_intensity_video(config: &SceneConfig) -> Result<(IntensityVideo, GroundTruth), SynthError> {
    config.validate()?;
    let frame_times = config.frame_times();
    let frames = par::map_slice(&frame_times, |&t| config.render_frame(t));
    let gt = config.ground_truth(&frame_times);
    Ok((
        IntensityVideo {
            frames,
            frame_times,
            fps: config.fps,
        },
        gt,
    ))
}

/// Contrast-threshold event simulation.
///
/// Each pixel keeps a reference level `L_0 + n·c`. Between consecutive frames
/// `L` moves linearly in time; every crossing of the next level up or down
/// emits one event at the interpolated time and moves the reference by `±c`.
/// Timestamps are rounded to the nearest microsecond and kept inside the
/// segment `(t_a, t_b]`, so reconstruction at a frame time sees exactly the
/// events of the preceding segments.
pub fn simulate_events(video: &IntensityVideo, c: f64) -> Result<EventStream, SynthError> {
    if !(c > 0.0) {
        return Err(SynthError::InvalidThreshold(c));
    }
    video.validate()?;
    let (h, w) = (video.height(), video.width());
    let logs: Vec<Array2<f64>> = par::map_range(video.frames.len(), |k| video.log_frame(k));
    let times = &video.frame_times;
    let per_pixel = par::map_range(h * w, |pix| {
        let (r, col) = (pix / w, pix % w);
        let (x, y) = (col as u16, r as u16);
        let base = logs[0][(r, col)];
        let mut level: i64 = 0;
        let mut out = Vec::new();
        for k in 1..logs.len() {
            let (la, lb) = (logs[k - 1][(r, col)], logs[k][(r, col)]);
            let (ta, tb) = (times[k - 1], times[k]);
            let crossing_time = |target: f64| {
                let frac = (target - la) / (lb - la);
                let t = (ta as f64 + frac * (tb - ta) as f64).round();
                (t.max(0.0) as u64).clamp(ta + 1, tb)
            };
            if lb > la {
                while base + (level + 1) as f64 * c <= lb + CROSSING_EPS {
                    level += 1;
                    out.push(Event::new(
                        crossing_time(base + level as f64 * c),
                        x,
                        y,
                        Polarity::Positive,
                    ));
                }
            } else if lb < la {
                while base + (level - 1) as f64 * c >= lb - CROSSING_EPS {
                    level -= 1;
                    out.push(Event::new(
                        crossing_time(base + level as f64 * c),
                        x,
                        y,
                        Polarity::Negative,
                    ));
                }
            }
        }
        out
    });
    let events = per_pixel.concat();
    Ok(EventStream::new(
        w as u32,
        h as u32,
        times[0],
        times[times.len() - 1],
        events,
    )?)
}

/// `L(x, t_q) = L(x, t_0) + c · Σ p_k` over events at `x` with `t_0 < t_k <= t_q`.
pub fn reconstruct_log_intensity(
    anchor: ArrayView2<f64>,
    anchor_time: u64,
    events: &EventStream,
    query_time: u64,
    c: f64,
) -> Result<Array2<f64>, SynthError> {
    if query_time < anchor_time {
        return Err(SynthError::QueryBeforeAnchor {
            query: query_time,
            anchor: anchor_time,
        });
    }
    if anchor.dim() != (events.height() as usize, events.width() as usize) {
        return Err(SynthError::ShapeMismatch(format!(
            "anchor {:?} vs stream {}x{}",
            anchor.dim(),
            events.width(),
            events.height()
        )));
    }
    let mut out = anchor.to_owned();
    for e in events.slice_half_open(anchor_time, query_time) {
        out[(usize::from(e.y), usize::from(e.x))] += c * e.p.sign();
    }
    Ok(out)
}

/// Double-integral blur of the latent log frame at `center_us`.
///
/// Returns `L̃(t') + ln((1/T) ∫ exp(c·E(t)) dt)` over `[t' - T/2, t' + T/2]`,
/// where `E(t) = C(t) - C(t'⁻)` and `C` is the right-continuous cumulative
/// signed event count at the pixel. The integral is exact: `E` is piecewise
/// constant between event timestamps.
pub fn edi_blur_log(
    latent_log: ArrayView2<f64>,
    center_us: u64,
    window_us: u64,
    events: &EventStream,
    c: f64,
) -> Result<Array2<f64>, SynthError> {
    if window_us == 0 {
        return Err(SynthError::EmptyWindow);
    }
    let (h, w) = latent_log.dim();
    if (h, w) != (events.height() as usize, events.width() as usize) {
        return Err(SynthError::ShapeMismatch(format!(
            "latent {:?} vs stream {}x{}",
            latent_log.dim(),
            events.width(),
            events.height()
        )));
    }
    let half = window_us as f64 / 2.0;
    let (lo, hi) = (center_us as f64 - half, center_us as f64 + half);
    if lo < events.t_start() as f64 || hi > events.t_end() as f64 {
        return Err(SynthError::WindowNotCovered {
            lo,
            hi,
            t_start: events.t_start(),
            t_end: events.t_end(),
        });
    }
    // Events with lo < t <= hi, bucketed per pixel in time order.
    let mut per_pixel: Vec<Vec<(f64, f64)>> = vec![Vec::new(); h * w];
    for e in events.events() {
        let t = e.t as f64;
        if t > lo && t <= hi {
            per_pixel[usize::from(e.y) * w + usize::from(e.x)].push((t, e.p.sign()));
        }
    }
    let center = center_us as f64;
    let offsets = par::map_slice(&per_pixel, |evs| {
        // E(lo) = -(Σ p over lo < t_k < t').
        let mut e_val: f64 = -evs.iter().filter(|(t, _)| *t < center).map(|(_, p)| p).sum::<f64>();
        let mut prev = lo;
        let mut integral = 0.0;
        for &(t, p) in evs {
            integral += (c * e_val).exp() * (t - prev);
            e_val += p;
            prev = t;
        }
        integral += (c * e_val).exp() * (hi - prev);
        (integral / window_us as f64).ln()
    });
    let offsets = Array2::from_shape_vec((h, w), offsets).expect("one value per pixel");
    Ok(&latent_log + &offsets)
}

/// [`edi_blur_log`] with the latent frame taken from `latent` at `center_us`.
pub fn edi_blur(
    latent: &IntensityVideo,
    center_us: u64,
    window_us: u64,
    events: &EventStream,
    c: f64,
) -> Result<Array2<f64>, SynthError> {
    let l = latent.log_frame_at(center_us)?;
    edi_blur_log(l.view(), center_us, window_us, events, c)
}
