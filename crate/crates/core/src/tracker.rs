//! Correlation-pyramid trajectory refinement and the sliding-window
//! orchestration over the fusion timeline.

use ndarray::{concatenate, Array1, Array2, Array3, ArrayView2, Axis};
use thiserror::Error;

use crate::events::{bin_events, exposure_window_events, EventError, EventStream, Timeline};
use crate::fusion::{
    batch_tensor, decode_pyramid, encode_skips, taf_init_with_tensor, taf_update_with_tensor, temporal_attention,
    FeaturePyramid, FusionError, PyramidLevel, TransientState,
};
use crate::nn::{layer_norm, relu, temporal_encodings};
use crate::par;
use crate::synth::IntensityVideo;
use crate::tracks::{TrackPoint, TrackSet};
use crate::weights::{CorrelationEncoder, TrackerWeights, WeightBundle};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackerError {
    #[error("query {index} is off the query grid or outside the image")]
    QueryOutOfRange { index: usize },
    #[error("{frames} frames supplied for {frame_times} frame times")]
    FrameCountMismatch { frames: usize, frame_times: usize },
    #[error("the first query time must carry a frame")]
    NoInitialFrame,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("refinement needs at least one iteration")]
    NoIterations,
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Events(#[from] EventError),
}

type Result<T> = std::result::Result<T, TrackerError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryPoint {
    pub t_q: u64,
    pub x: f64,
    pub y: f64,
}

/// Estimates of one query over one window.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    /// `T×2`, `(x, y)` in pixels.
    pub positions: Array2<f64>,
    pub visibility_logits: Array1<f64>,
    pub window_times: Vec<u64>,
}

impl TrackState {
    pub fn constant(x: f64, y: f64, logit: f64, window_times: Vec<u64>) -> Self {
        let n = window_times.len();
        Self {
            positions: Array2::from_shape_fn((n, 2), |(_, c)| if c == 0 { x } else { y }),
            visibility_logits: Array1::from_elem(n, logit),
            window_times,
        }
    }

    pub fn len(&self) -> usize {
        self.window_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window_times.is_empty()
    }

    pub fn visible(&self, t: usize) -> bool {
        self.visibility_logits[t] > 0.0
    }
}

/// Invocation counters of one [`track_sequence`] run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrackStats {
    pub init_calls: usize,
    pub update_calls: usize,
    pub windows: usize,
    pub steps: usize,
}

/// Bilinear `(2r+1)²×C` patch around `center` (pixels). Taps sit at integer
/// offsets of one level cell, row-major over `(dy, dx)`; corners outside the
/// map contribute zero.
pub fn sample_patch(level: &PyramidLevel, center: (f64, f64), r: usize) -> Array2<f64> {
    let (h, w, c) = level.data.dim();
    let span = 2 * r + 1;
    let s = level.stride as f64;
    let (cx, cy) = (center.0 / s, center.1 / s);
    let mut out = Array2::zeros((span * span, c));
    let ri = r as isize;
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            let tap = (dy + ri) as usize * span + (dx + ri) as usize;
            let (u, v) = (cx + dx as f64, cy + dy as f64);
            let (x0, y0) = (u.floor(), v.floor());
            let (fx, fy) = (u - x0, v - y0);
            let corners = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1.0, y0, fx * (1.0 - fy)),
                (x0, y0 + 1.0, (1.0 - fx) * fy),
                (x0 + 1.0, y0 + 1.0, fx * fy),
            ];
            let mut row = out.row_mut(tap);
            for (x, y, wt) in corners {
                if wt == 0.0 || x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                    continue;
                }
                row.scaled_add(wt, &level.data.slice(ndarray::s![y as usize, x as usize, ..]));
            }
        }
    }
    out
}

/// Inner products of every tap of `patch` with every tap of `anchor`.
pub fn correlation_matrix(patch: ArrayView2<f64>, anchor: ArrayView2<f64>) -> Result<Array2<f64>> {
    if patch.dim() != anchor.dim() {
        return Err(TrackerError::ShapeMismatch(format!(
            "patch {:?} vs anchor {:?}",
            patch.dim(),
            anchor.dim()
        )));
    }
    Ok(patch.dot(&anchor.t()))
}

fn encode_correlation(corr: &Array2<f64>, enc: &CorrelationEncoder) -> Result<Array1<f64>> {
    let flat = corr.iter().copied().collect::<Array1<f64>>();
    if flat.len() != enc.hidden.fan_in() {
        return Err(TrackerError::ShapeMismatch(format!(
            "{} correlation entries, encoder expects {}",
            flat.len(),
            enc.hidden.fan_in()
        )));
    }
    let hidden = enc.hidden.forward_vec(flat.view()).mapv(|v| v.max(0.0));
    Ok(enc.out.forward_vec(hidden.view()))
}

/// Per-step descriptor: for each level, the correlation of the step's patch
/// against the anchor patch, flattened and MLP-encoded; levels concatenated.
pub fn correlation_features(
    patches: &[Array2<f64>],
    anchor: &[Array2<f64>],
    weights: &TrackerWeights,
) -> Result<Array1<f64>> {
    if patches.len() != weights.corr.len() || anchor.len() != weights.corr.len() {
        return Err(TrackerError::ShapeMismatch(
            "one patch per pyramid level expected".into(),
        ));
    }
    let mut parts = Vec::with_capacity(patches.len());
    for ((p, a), enc) in patches.iter().zip(anchor).zip(&weights.corr) {
        parts.push(encode_correlation(&correlation_matrix(p.view(), a.view())?, enc)?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| TrackerError::ShapeMismatch(e.to_string()))
}

/// Sinusoidal encoding of a displacement: for `ω_k = 10000^(−k/F)`,
/// `[sin ω_k dx, cos ω_k dx, sin ω_k dy, cos ω_k dy]` over `k < F`.
pub fn motion_encoding(dx: f64, dy: f64, freqs: usize) -> Array1<f64> {
    let mut out = Array1::zeros(4 * freqs);
    for k in 0..freqs {
        let w = 10000f64.powf(-(k as f64) / freqs as f64);
        out[4 * k] = (w * dx).sin();
        out[4 * k + 1] = (w * dx).cos();
        out[4 * k + 2] = (w * dy).sin();
        out[4 * k + 3] = (w * dy).cos();
    }
    out
}

fn step_features(state: &TrackState, pyramids: &[&FeaturePyramid], bundle: &WeightBundle) -> Result<Array2<f64>> {
    let cfg = &bundle.config;
    let r = cfg.corr_radius;
    let patches: Vec<Vec<Array2<f64>>> = (0..state.len())
        .map(|t| {
            let c = (state.positions[(t, 0)], state.positions[(t, 1)]);
            pyramids[t].levels.iter().map(|l| sample_patch(l, c, r)).collect()
        })
        .collect();
    let (ax, ay) = (state.positions[(0, 0)], state.positions[(0, 1)]);
    let mut x = Array2::zeros((state.len(), cfg.tracker_input_width()));
    for t in 0..state.len() {
        let corr = correlation_features(&patches[t], &patches[0], &bundle.tracker)?;
        let motion = motion_encoding(
            state.positions[(t, 0)] - ax,
            state.positions[(t, 1)] - ay,
            cfg.motion_freqs,
        );
        let mut row = x.row_mut(t);
        let (e, m) = (corr.len(), motion.len());
        if e + m + 1 != row.len() {
            return Err(TrackerError::ShapeMismatch(format!(
                "step feature has {} entries, input layer expects {}",
                e + m + 1,
                row.len()
            )));
        }
        row.slice_mut(ndarray::s![..e]).assign(&corr);
        row.slice_mut(ndarray::s![e..e + m]).assign(&motion);
        row[e + m] = state.visibility_logits[t];
    }
    Ok(x)
}

/// Pre-norm temporal transformer over the window: each block adds a
/// temporal self-attention branch and a ReLU MLP branch.
fn transformer(x: Array2<f64>, w: &TrackerWeights) -> Array2<f64> {
    let pe = temporal_encodings(x.nrows(), x.ncols());
    let mut x = x;
    for block in &w.blocks {
        let n = layer_norm(x.view());
        let qk = &n + &pe;
        let (branch, _) = crate::fusion::attend_forward(n.view(), qk.view(), &block.attention);
        x = x + branch;
        let n = layer_norm(x.view());
        let hidden = relu(block.mlp_in.forward(n.view()));
        x = x + block.mlp_out.forward(hidden.view());
    }
    x
}

/// `iterations` rounds of `x ← x + Δx`, `v ← v + Δv`, each driven by
/// correlation and motion features at the current estimates. The window's
/// first step is the correlation and motion anchor.
pub fn refine_track(
    state: &TrackState,
    pyramids: &[&FeaturePyramid],
    bundle: &WeightBundle,
    iterations: usize,
) -> Result<TrackState> {
    if iterations == 0 {
        return Err(TrackerError::NoIterations);
    }
    if pyramids.len() != state.len()
        || state.positions.nrows() != state.len()
        || state.visibility_logits.len() != state.len()
    {
        return Err(TrackerError::ShapeMismatch(format!(
            "{} window steps with {} pyramids",
            state.len(),
            pyramids.len()
        )));
    }
    let w = &bundle.tracker;
    let mut cur = state.clone();
    if cur.is_empty() {
        return Ok(cur);
    }
    for _ in 0..iterations {
        let x = w.input.forward(step_features(&cur, pyramids, bundle)?.view());
        let x = transformer(x, w);
        cur.positions += &w.delta_position.forward(x.view());
        cur.visibility_logits += &w.delta_visibility.forward(x.view()).column(0);
    }
    Ok(cur)
}

/// Window start indices: stride `window/2`, the last start clamped so the
/// final window ends on the last step.
pub fn window_starts(steps: usize, window: usize) -> Vec<usize> {
    if steps <= window {
        return vec![0];
    }
    let stride = (window / 2).max(1);
    let mut starts = vec![0];
    let mut s = 0;
    while s + window < steps {
        s = (s + stride).min(steps - window);
        starts.push(s);
    }
    starts
}

/// Replicates a single-channel frame across `channels`.
pub fn gray_to_channels(frame: ArrayView2<f64>, channels: usize) -> Array3<f64> {
    let (h, w) = frame.dim();
    Array3::from_shape_fn((h, w, channels), |(y, x, _)| frame[(y, x)])
}

/// The video frames at `timeline`'s frame times, replicated to `channels`.
pub fn frames_for_timeline(video: &IntensityVideo, timeline: &Timeline, channels: usize) -> Result<Vec<Array3<f64>>> {
    timeline
        .frame_times()
        .iter()
        .map(|t| match video.frame_times.binary_search(t) {
            Ok(k) => Ok(gray_to_channels(video.frames[k].view(), channels)),
            Err(_) => Err(TrackerError::ShapeMismatch(format!("video has no frame at {t} us"))),
        })
        .collect()
}

struct StepData {
    state: TransientState,
    skips: Vec<Array3<f64>>,
}

/// Runs the fusion state machine over the timeline, then refines every query
/// over sliding windows.
///
/// `frames[i]` is the image at `timeline.frame_times()[i]`. At a frame time the
/// state is re-initialized from the frame and its exposure-window events; at
/// every other query time it is updated with that step's event bin. Steps
/// before a query's `t_q` are emitted frozen at the query with `visible =
/// false`. Queries are independent and refined in parallel.
pub fn track_sequence(
    frames: &[Array3<f64>],
    events: &EventStream,
    timeline: &Timeline,
    queries: &[QueryPoint],
    bundle: &WeightBundle,
) -> Result<(TrackSet, TrackStats)> {
    let cfg = &bundle.config;
    let qt = timeline.query_times();
    if frames.len() != timeline.frame_times().len() {
        return Err(TrackerError::FrameCountMismatch {
            frames: frames.len(),
            frame_times: timeline.frame_times().len(),
        });
    }
    if !timeline.is_frame_time(qt[0]) {
        return Err(TrackerError::NoInitialFrame);
    }
    let (h, w) = (events.height() as usize, events.width() as usize);
    if let Some(f) = frames.iter().find(|f| (f.dim().0, f.dim().1) != (h, w)) {
        return Err(TrackerError::ShapeMismatch(format!(
            "frame {}x{} vs sensor {h}x{w}",
            f.dim().0,
            f.dim().1
        )));
    }
    let query_steps = queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let in_image = q.x.is_finite()
                && q.y.is_finite()
                && q.x >= 0.0
                && q.y >= 0.0
                && q.x <= (w - 1) as f64
                && q.y <= (h - 1) as f64;
            match qt.binary_search(&q.t_q) {
                Ok(k) if in_image => Ok(k),
                _ => Err(TrackerError::QueryOutOfRange { index: i }),
            }
        })
        .collect::<Result<Vec<usize>>>()?;

    let mut stats = TrackStats {
        steps: qt.len(),
        ..TrackStats::default()
    };
    let bins = bin_events(events, timeline)?;
    let mut steps: Vec<StepData> = Vec::with_capacity(qt.len());
    let mut frame_idx = 0;
    for (k, &t) in qt.iter().enumerate() {
        let data = if timeline.is_frame_time(t) {
            let frame = &frames[frame_idx];
            frame_idx += 1;
            let exposure = exposure_window_events(events, t, timeline.exposure_us());
            let tensor = batch_tensor(&exposure, w, h, cfg.bins)?;
            stats.init_calls += 1;
            StepData {
                state: taf_init_with_tensor(frame.view(), t, &tensor, bundle)?,
                skips: encode_skips(frame.view(), &tensor, bundle)?,
            }
        } else {
            let tensor = batch_tensor(&bins[k], w, h, cfg.bins)?;
            let prev = &steps[k - 1].state;
            stats.update_calls += 1;
            StepData {
                state: taf_update_with_tensor(prev, &bins[k], &tensor, bundle)?,
                skips: encode_skips(frames[frame_idx - 1].view(), &tensor, bundle)?,
            }
        };
        steps.push(data);
    }

    let n = qt.len();
    let win = cfg.window.min(n);
    let init_logit = cfg.initial_visibility_logit;
    // Latest estimate per query per step; `None` until some window covers it.
    let mut estimates: Vec<Vec<Option<(f64, f64, f64)>>> = vec![vec![None; n]; queries.len()];
    for start in window_starts(n, win) {
        stats.windows += 1;
        let end = start + win;
        let states: Vec<TransientState> = steps[start..end].iter().map(|s| s.state.clone()).collect();
        let attended = temporal_attention(&states, &bundle.fusion.temporal)?;
        let pyramids = par::map_range(win, |i| {
            decode_pyramid(&attended[i], &steps[start + i].skips, &bundle.fusion.decoder, cfg.patch)
        })
        .into_iter()
        .collect::<std::result::Result<Vec<_>, _>>()?;

        let refined = par::map_range(queries.len(), |qi| -> Result<Option<(usize, TrackState)>> {
            let q = queries[qi];
            let first = start.max(query_steps[qi]);
            if first >= end {
                return Ok(None);
            }
            let est = &estimates[qi];
            let mut carry = est[..first]
                .iter()
                .rev()
                .find_map(|e| *e)
                .unwrap_or((q.x, q.y, init_logit));
            let mut init = TrackState::constant(q.x, q.y, init_logit, qt[first..end].to_vec());
            for (i, k) in (first..end).enumerate() {
                if let Some(e) = est[k] {
                    carry = e;
                }
                init.positions[(i, 0)] = carry.0;
                init.positions[(i, 1)] = carry.1;
                init.visibility_logits[i] = carry.2;
            }
            let pyr: Vec<&FeaturePyramid> = pyramids[first - start..].iter().collect();
            Ok(Some((first, refine_track(&init, &pyr, bundle, cfg.iterations)?)))
        });
        for (qi, r) in refined.into_iter().enumerate() {
            if let Some((first, st)) = r? {
                for i in 0..st.len() {
                    estimates[qi][first + i] =
                        Some((st.positions[(i, 0)], st.positions[(i, 1)], st.visibility_logits[i]));
                }
            }
        }
    }

    let tracks = queries
        .iter()
        .zip(&query_steps)
        .zip(&estimates)
        .map(|((q, &kq), est)| {
            (0..n)
                .map(|k| match est[k] {
                    Some((x, y, v)) if k >= kq => TrackPoint::new(x, y, v > 0.0),
                    _ => TrackPoint::new(q.x, q.y, false),
                })
                .collect()
        })
        .collect();
    let set = TrackSet::new(qt.to_vec(), tracks).map_err(|e| TrackerError::ShapeMismatch(e.to_string()))?;
    Ok((set, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn level(data: Array3<f64>, stride: usize) -> PyramidLevel {
        PyramidLevel { data, stride }
    }

    fn scalar_bilinear(l: &PyramidLevel, x: f64, y: f64, ch: usize) -> f64 {
        let (h, w, _) = l.data.dim();
        let read = |xi: i64, yi: i64| {
            if xi < 0 || yi < 0 || xi >= w as i64 || yi >= h as i64 {
                0.0
            } else {
                l.data[(yi as usize, xi as usize, ch)]
            }
        };
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (xi, yi) = (x0 as i64, y0 as i64);
        read(xi, yi) * (1.0 - fx) * (1.0 - fy)
            + read(xi + 1, yi) * fx * (1.0 - fy)
            + read(xi, yi + 1) * (1.0 - fx) * fy
            + read(xi + 1, yi + 1) * fx * fy
    }

    #[test]
    fn node_and_midpoint_sampling() {
        let mut d = Array3::zeros((3, 3, 2));
        d[(1, 1, 0)] = 4.0;
        d[(1, 1, 1)] = -1.0;
        d[(1, 2, 0)] = 2.0;
        let l = level(d, 4);
        assert_eq!(sample_patch(&l, (4.0, 4.0), 0), array![[4.0, -1.0]]);
        assert_eq!(sample_patch(&l, (6.0, 4.0), 0), array![[3.0, -0.5]]);
    }

    #[test]
    fn out_of_bounds_taps_are_zero() {
        let l = level(Array3::from_elem((2, 2, 1), 1.0), 2);
        let p = sample_patch(&l, (0.0, 0.0), 1);
        // Row-major (dy, dx): only dy, dx >= 0 taps land on the map.
        assert_eq!(p.column(0).to_vec(), vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
        let far = sample_patch(&l, (-100.0, 50.0), 3);
        assert!(far.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sampling_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = level(Array3::from_shape_fn((6, 7, 3), |_| rng.random_range(-1.0..1.0)), 4);
        for _ in 0..200 {
            let (x, y) = (rng.random_range(-8.0..36.0), rng.random_range(-8.0..30.0));
            let p = sample_patch(&l, (x, y), 3);
            assert_eq!(p.dim(), (49, 3));
            for dy in -3i32..=3 {
                for dx in -3i32..=3 {
                    let tap = ((dy + 3) * 7 + dx + 3) as usize;
                    for ch in 0..3 {
                        let r = scalar_bilinear(&l, x / 4.0 + dx as f64, y / 4.0 + dy as f64, ch);
                        assert!((p[(tap, ch)] - r).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn correlation_gram_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Array2::from_shape_fn((49, 5), |_| rng.random_range(-1.0..1.0));
        let g = correlation_matrix(p.view(), p.view()).unwrap();
        assert_eq!(g.dim(), (49, 49));
        for t in 0..49 {
            assert!((g[(t, t)] - p.row(t).dot(&p.row(t))).abs() < 1e-12);
        }
        let mut a = Array2::zeros((4, 4));
        let mut b = Array2::zeros((4, 4));
        for t in 0..4 {
            a[(t, 0)] = rng.random_range(-1.0..1.0);
            a[(t, 1)] = rng.random_range(-1.0..1.0);
            b[(t, 2)] = rng.random_range(-1.0..1.0);
            b[(t, 3)] = rng.random_range(-1.0..1.0);
        }
        assert!(correlation_matrix(a.view(), b.view())
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        let q = Array2::from_shape_fn((49, 5), |_| rng.random_range(-1.0..1.0));
        let c = correlation_matrix(q.view(), p.view()).unwrap();
        for i in 0..49 {
            for j in 0..49 {
                let d: f64 = (0..5).map(|k| q[(i, k)] * p[(j, k)]).sum();
                assert!((c[(i, j)] - d).abs() < 1e-12);
            }
        }
        assert!(correlation_matrix(q.view(), p.slice(ndarray::s![..48, ..])).is_err());
    }

    #[test]
    fn window_schedule() {
        assert_eq!(window_starts(96, 16), vec![0, 8, 16, 24, 32, 40, 48, 56, 64, 72, 80]);
        assert_eq!(window_starts(20, 16), vec![0, 4]);
        assert_eq!(window_starts(10, 16), vec![0]);
        assert_eq!(window_starts(16, 16), vec![0]);
        assert_eq!(window_starts(75, 16), vec![0, 8, 16, 24, 32, 40, 48, 56, 59]);
        for n in 1..200 {
            let s = window_starts(n, 16);
            let w = 16.min(n);
            assert_eq!(*s.last().unwrap() + w, n);
            assert!(s.windows(2).all(|p| p[1] > p[0] && p[1] - p[0] <= 8));
        }
    }

    #[test]
    fn motion_encoding_at_zero() {
        let m = motion_encoding(0.0, 0.0, 4);
        assert_eq!(m.to_vec(), [0.0, 1.0, 0.0, 1.0].repeat(4));
        let m = motion_encoding(2.0, -1.0, 2);
        assert!((m[0] - 2f64.sin()).abs() < 1e-15 && (m[6] - (-0.01f64).sin()).abs() < 1e-15);
    }
}
