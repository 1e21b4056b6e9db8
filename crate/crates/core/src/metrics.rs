//! Tracking evaluation: position accuracy, occlusion accuracy, Jaccard,
//! feature age, ground-truth spike removal, speed-weighted success and PCA
//! dispersion of feature embeddings.
//!
//! [`brute`] holds straight-loop twins of every metric for cross-checking.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;
use crate::tracks::{TrackPoint, TrackSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("predicted and reference tracks do not share a query count and time grid")]
    GridMismatch,
    #[error("threshold list must be non-empty, positive and ascending")]
    BadThresholds,
    #[error("total reference speed is zero")]
    ZeroTotalSpeed,
    #[error("rve and speed lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("pooled features have no variance")]
    DegenerateCovariance,
    #[error("no feature vectors supplied")]
    NoFeatures,
}

type Result<T> = std::result::Result<T, MetricError>;

/// Base pixel thresholds, defined for 256-pixel-high images.
pub const BASE_THRESHOLDS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];
pub const DEFAULT_FA_THRESHOLD: f64 = 5.0;
pub const DEFAULT_SMOOTH_CUTOFF: f64 = 0.1;

/// `{1, 2, 4, 8, 16}` px rescaled from 256-px to `image_height`-px images.
pub fn default_thresholds(image_height: f64) -> Vec<f64> {
    BASE_THRESHOLDS.iter().map(|t| t * image_height / 256.0).collect()
}

/// Predictions and reference on one time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    predicted: TrackSet,
    reference: TrackSet,
    image_height: f64,
}

impl EvalPair {
    pub fn new(predicted: TrackSet, reference: TrackSet, image_height: f64) -> Result<Self> {
        if predicted.times() != reference.times() || predicted.num_queries() != reference.num_queries() {
            return Err(MetricError::GridMismatch);
        }
        Ok(Self {
            predicted,
            reference,
            image_height,
        })
    }

    pub fn predicted(&self) -> &TrackSet {
        &self.predicted
    }

    pub fn reference(&self) -> &TrackSet {
        &self.reference
    }

    pub fn image_height(&self) -> f64 {
        self.image_height
    }

    fn pairs(&self) -> impl Iterator<Item = (&[TrackPoint], &[TrackPoint])> {
        self.predicted
            .tracks()
            .iter()
            .zip(self.reference.tracks())
            .map(|(p, r)| (p.as_slice(), r.as_slice()))
    }
}

fn check_thresholds(t: &[f64]) -> Result<()> {
    if t.is_empty() || t.iter().any(|&x| !(x > 0.0)) || t.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MetricError::BadThresholds);
    }
    Ok(())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
    within: usize,
    ref_visible: usize,
}

fn counts(pred: &[TrackPoint], reference: &[TrackPoint], theta: f64) -> Counts {
    let mut c = Counts::default();
    for (p, r) in pred.iter().zip(reference) {
        let close = p.distance(r) < theta;
        if r.visible {
            c.ref_visible += 1;
            c.within += close as usize;
        }
        match (p.visible, r.visible, close) {
            (true, true, true) => c.tp += 1,
            (true, true, false) => {
                c.fp += 1;
                c.fn_ += 1;
            }
            (true, false, _) => c.fp += 1,
            (false, true, _) => c.fn_ += 1,
            (false, false, _) => {}
        }
    }
    c
}

fn total_counts(pair: &EvalPair, theta: f64) -> Counts {
    pair.pairs().fold(Counts::default(), |mut acc, (p, r)| {
        let c = counts(p, r, theta);
        acc.tp += c.tp;
        acc.fp += c.fp;
        acc.fn_ += c.fn_;
        acc.within += c.within;
        acc.ref_visible += c.ref_visible;
        acc
    })
}

/// Mean over thresholds of the fraction of reference-visible points with
/// error strictly below the threshold. No visible reference points scores 1.
pub fn delta_avg_vis(pair: &EvalPair, thresholds: &[f64]) -> Result<f64> {
    check_thresholds(thresholds)?;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let c = total_counts(pair, t);
            ratio(c.within, c.ref_visible)
        })
        .sum::<f64>()
        / thresholds.len() as f64)
}

/// Fraction of (query, step) pairs whose visibility flags agree.
pub fn occlusion_accuracy(pair: &EvalPair) -> f64 {
    let (agree, total) = pair.pairs().fold((0, 0), |(a, n), (p, r)| {
        (
            a + p.iter().zip(r).filter(|(x, y)| x.visible == y.visible).count(),
            n + p.len(),
        )
    });
    ratio(agree, total)
}

/// Mean over thresholds of `TP / (TP + FP + FN)`; a threshold with no
/// positives at all scores 1.
pub fn average_jaccard(pair: &EvalPair, thresholds: &[f64]) -> Result<f64> {
    check_thresholds(thresholds)?;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let c = total_counts(pair, t);
            ratio(c.tp, c.tp + c.fp + c.fn_)
        })
        .sum::<f64>()
        / thresholds.len() as f64)
}

/// Age of one track: time until the first step whose error exceeds
/// `threshold`, as a fraction of the track's duration. A track that never
/// fails has age 1; a single-step track has age 1 or 0.
pub fn track_age(times: &[u64], pred: &[TrackPoint], reference: &[TrackPoint], threshold: f64) -> f64 {
    match pred.iter().zip(reference).position(|(p, r)| p.distance(r) > threshold) {
        None => 1.0,
        Some(0) => 0.0,
        Some(k) => (times[k] - times[0]) as f64 / (times[times.len() - 1] - times[0]) as f64,
    }
}

/// `(FA, EFA)`: mean age over tracks that survive their first step, and over
/// all tracks with immediate failures counted as 0. FA is 0 when no track
/// survives.
pub fn feature_age(pair: &EvalPair, threshold: f64) -> (f64, f64) {
    let times = pair.predicted.times();
    let ages: Vec<(bool, f64)> = pair
        .pairs()
        .map(|(p, r)| {
            let survived = p.first().zip(r.first()).is_none_or(|(a, b)| a.distance(b) <= threshold);
            (survived, track_age(times, p, r, threshold))
        })
        .collect();
    if ages.is_empty() {
        return (1.0, 1.0);
    }
    let survivors: Vec<f64> = ages.iter().filter(|a| a.0).map(|a| a.1).collect();
    let fa = if survivors.is_empty() {
        0.0
    } else {
        survivors.iter().sum::<f64>() / survivors.len() as f64
    };
    let efa = ages.iter().map(|a| a.1).sum::<f64>() / ages.len() as f64;
    (fa, efa)
}

/// Replaces interior spikes: a step whose displacement from both neighbors
/// exceeds `cutoff × image_height` is moved onto the time-weighted line
/// between its neighbors. Spikes are detected on the input in a single pass.
pub fn smooth_gt(times: &[u64], track: &[TrackPoint], cutoff: f64, image_height: f64) -> Vec<TrackPoint> {
    let limit = cutoff * image_height;
    let mut out = track.to_vec();
    for i in 1..track.len().saturating_sub(1) {
        let (a, p, b) = (&track[i - 1], &track[i], &track[i + 1]);
        if p.distance(a) > limit && p.distance(b) > limit {
            let f = (times[i] - times[i - 1]) as f64 / (times[i + 1] - times[i - 1]) as f64;
            out[i].x = a.x + f * (b.x - a.x);
            out[i].y = a.y + f * (b.y - a.y);
        }
    }
    out
}

/// [`smooth_gt`] applied to every track of a set.
pub fn smooth_track_set(set: &TrackSet, cutoff: f64, image_height: f64) -> TrackSet {
    let tracks = set
        .tracks()
        .iter()
        .map(|t| smooth_gt(set.times(), t, cutoff, image_height))
        .collect();
    TrackSet::new(set.times().to_vec(), tracks).expect("same grid as the input")
}

/// `n` evenly spaced points on `[0, 1]`.
pub fn xi_grid(n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// `S_ξ = Σ‖v_i‖·[RVE_i < ξ] / Σ‖v_i‖` at each `ξ`, and the trapezoidal area
/// under the curve.
pub fn speed_weighted_success(rve: &[f64], gt_speed: &[f64], xi: &[f64]) -> Result<(Vec<f64>, f64)> {
    if rve.len() != gt_speed.len() {
        return Err(MetricError::LengthMismatch(rve.len(), gt_speed.len()));
    }
    let total: f64 = gt_speed.iter().sum();
    if !(total > 0.0) {
        return Err(MetricError::ZeroTotalSpeed);
    }
    let mut order: Vec<usize> = (0..rve.len()).collect();
    order.sort_by(|&a, &b| rve[a].total_cmp(&rve[b]));
    let mut xi_order: Vec<usize> = (0..xi.len()).collect();
    xi_order.sort_by(|&a, &b| xi[a].total_cmp(&xi[b]));
    let mut curve = vec![0.0; xi.len()];
    let (mut k, mut acc) = (0, 0.0);
    for &j in &xi_order {
        while k < order.len() && rve[order[k]] < xi[j] {
            acc += gt_speed[order[k]];
            k += 1;
        }
        curve[j] = acc / total;
    }
    let auc = xi_order
        .windows(2)
        .map(|w| 0.5 * (curve[w[0]] + curve[w[1]]) * (xi[w[1]] - xi[w[0]]))
        .sum();
    Ok((curve, auc))
}

/// Per-step relative velocity errors and reference speeds from finite
/// differences of positions, over steps whose reference endpoints are both
/// visible. A zero reference velocity yields RVE 0 if the prediction is also
/// still and infinity otherwise; it carries no weight either way.
pub fn velocity_errors(pair: &EvalPair) -> (Vec<f64>, Vec<f64>) {
    let times = pair.predicted.times();
    let mut rve = Vec::new();
    let mut speed = Vec::new();
    for (p, r) in pair.pairs() {
        for i in 0..p.len().saturating_sub(1) {
            if !(r[i].visible && r[i + 1].visible) {
                continue;
            }
            let dt = (times[i + 1] - times[i]) as f64 * 1e-6;
            let (gx, gy) = ((r[i + 1].x - r[i].x) / dt, (r[i + 1].y - r[i].y) / dt);
            let (px, py) = ((p[i + 1].x - p[i].x) / dt, (p[i + 1].y - p[i].y) / dt);
            let g = gx.hypot(gy);
            let e = (px - gx).hypot(py - gy);
            rve.push(if g > 0.0 {
                e / g
            } else if e == 0.0 {
                0.0
            } else {
                f64::INFINITY
            });
            speed.push(g);
        }
    }
    (rve, speed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaDispersion {
    /// `2×d`; a rank-1 input has a zero second row.
    pub axes: Array2<f64>,
    pub eigenvalues: [f64; 2],
    pub pooled_mean: Array1<f64>,
    /// Per point, its `T×2` projected features.
    pub projections: Vec<Array2<f64>>,
    pub point_means: Vec<[f64; 2]>,
    /// Per point, the population covariance of its projections.
    pub covariances: Vec<Array2<f64>>,
}

/// Convergence tolerance on the estimated angle between the iterated plane
/// and the true top-2 eigenspace.
pub const PCA_TOLERANCE: f64 = 1e-10;
const PCA_MAX_ITERATIONS: usize = 200_000;

/// Orthonormalizes the columns of `v` in place (modified Gram-Schmidt). A
/// column that collapses is replaced by the first standard basis vector
/// that survives orthogonalization.
fn orthonormalize(v: &mut Array2<f64>, floor: f64) {
    let (d, k) = v.dim();
    for j in 0..k {
        let candidates = std::iter::once(None).chain((0..d).map(Some));
        for seed in candidates {
            if let Some(e) = seed {
                v.column_mut(j).fill(0.0);
                v[(e, j)] = 1.0;
            }
            for i in 0..j {
                let proj = v.column(i).dot(&v.column(j));
                let ci = v.column(i).to_owned();
                v.column_mut(j).scaled_add(-proj, &ci);
            }
            let n = v.column(j).dot(&v.column(j)).sqrt();
            if n > floor {
                v.column_mut(j).mapv_inplace(|x| x / n);
                break;
            }
        }
    }
}

/// Eigenpairs of a symmetric 2×2 matrix, larger eigenvalue first.
fn eig2(a: f64, b: f64, c: f64) -> ([f64; 2], [[f64; 2]; 2]) {
    let theta = 0.5 * (2.0 * b).atan2(a - c);
    let (sn, cs) = theta.sin_cos();
    let l1 = a * cs * cs + 2.0 * b * sn * cs + c * sn * sn;
    let l2 = a * sn * sn - 2.0 * b * sn * cs + c * cs * cs;
    ([l1, l2], [[cs, sn], [-sn, cs]])
}

/// Top-2 eigenpairs of a symmetric PSD matrix by block power iteration with
/// one guard vector; the guard's Rayleigh quotient estimates the gap that
/// bounds the plane's error.
fn top_two(c: &Array2<f64>, scale: f64) -> (Array2<f64>, [f64; 2]) {
    let d = c.nrows();
    let k = d.min(3);
    // Fixed, well-spread start so results do not depend on a generator.
    let mut v = Array2::from_shape_fn((d, k), |(i, j)| {
        ((i * 7 + j * 13 + 1) as f64 * 0.618_033_988_75).fract() - 0.5
    });
    let floor = 1e-14 * scale.max(f64::MIN_POSITIVE);
    orthonormalize(&mut v, 1e-300);
    for _ in 0..PCA_MAX_ITERATIONS {
        let mut w = c.dot(&v);
        orthonormalize(&mut w, floor);
        v = w;
        if k < 3 {
            break;
        }
        let cv = c.dot(&v);
        let top = v.slice(ndarray::s![.., ..2]);
        let ctop = cv.slice(ndarray::s![.., ..2]);
        let t = top.t().dot(&ctop);
        let residual = (&ctop - &top.dot(&t)).mapv(|x| x * x).sum().sqrt();
        let lower = t[(0, 0)].min(t[(1, 1)]);
        let guard = v.column(2).dot(&cv.column(2));
        let gap = lower - guard;
        if residual <= PCA_TOLERANCE * gap.max(0.0) || residual <= floor {
            break;
        }
    }
    let top = v.slice(ndarray::s![.., ..2]).to_owned();
    let t = top.t().dot(&c.dot(&top));
    let (vals, vecs) = eig2(t[(0, 0)], 0.5 * (t[(0, 1)] + t[(1, 0)]), t[(1, 1)]);
    let mut axes = Array2::zeros((2, d));
    for (r, u) in vecs.iter().enumerate() {
        let mut a = &top.column(0) * u[0] + &top.column(1) * u[1];
        // Deterministic sign: largest-magnitude component positive.
        let pivot = a
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            a.mapv_inplace(|x| -x);
        }
        axes.row_mut(r).assign(&a);
    }
    (axes, vals)
}

/// Projects every point's features onto the top-2 principal axes of the
/// pooled set and reports per-point mean and covariance in that plane.
///
/// `features[i]` is `T_i×d`. Axes come from block power iteration.
pub fn pca_dispersion(features: &[Array2<f64>]) -> Result<PcaDispersion> {
    let d = features.first().map(|f| f.ncols()).ok_or(MetricError::NoFeatures)?;
    let pooled = ndarray::concatenate(Axis(0), &features.iter().map(|f| f.view()).collect::<Vec<_>>())
        .map_err(|_| MetricError::NoFeatures)?;
    if pooled.nrows() == 0 {
        return Err(MetricError::NoFeatures);
    }
    let mean = pooled.mean_axis(Axis(0)).expect("non-empty");
    let centered = &pooled - &mean;
    let cov = centered.t().dot(&centered) / pooled.nrows() as f64;
    let scale = cov.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 || !scale.is_finite() {
        return Err(MetricError::DegenerateCovariance);
    }
    let (mut axes, [l1, mut l2]) = if d == 1 {
        (ndarray::array![[1.0], [0.0]], [cov[(0, 0)], 0.0])
    } else {
        top_two(&cov, scale)
    };
    if l2 <= 1e-12 * l1 {
        axes.row_mut(1).fill(0.0);
        l2 = 0.0;
    }

    let per_point = par::map_slice(features, |f| {
        let proj = (f - &mean).dot(&axes.t());
        let m = proj.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(2));
        let c = &proj - &m;
        let n = proj.nrows().max(1) as f64;
        (proj.clone(), [m[0], m[1]], c.t().dot(&c) / n)
    });
    let mut projections = Vec::with_capacity(features.len());
    let mut point_means = Vec::with_capacity(features.len());
    let mut covariances = Vec::with_capacity(features.len());
    for (p, m, c) in per_point {
        projections.push(p);
        point_means.push(m);
        covariances.push(c);
    }
    Ok(PcaDispersion {
        axes,
        eigenvalues: [l1, l2],
        pooled_mean: mean,
        projections,
        point_means,
        covariances,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdBreakdown {
    pub threshold: f64,
    pub delta: f64,
    pub jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackBreakdown {
    pub query: usize,
    pub delta_avg_vis: f64,
    pub aj: f64,
    pub oa: f64,
    pub age: f64,
}

/// All metrics for one pair, with per-threshold and per-track breakdowns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub aj: f64,
    pub delta_avg_vis: f64,
    pub oa: f64,
    pub fa: f64,
    pub efa: f64,
    /// `None` when the reference never moves.
    pub auc_v: Option<f64>,
    pub thresholds: Vec<ThresholdBreakdown>,
    pub per_track: Vec<TrackBreakdown>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub thresholds: Vec<f64>,
    pub fa_threshold: f64,
    pub xi_points: usize,
}

impl EvalOptions {
    pub fn for_height(image_height: f64) -> Self {
        Self {
            thresholds: default_thresholds(image_height),
            fa_threshold: DEFAULT_FA_THRESHOLD,
            xi_points: 101,
        }
    }
}

pub const CSV_HEADER: &str = "aj,delta_avg_vis,oa,fa,efa,auc_v";

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    /// Header line plus one data row.
    pub fn to_csv(&self) -> String {
        let auc = self.auc_v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{CSV_HEADER}\n{},{},{},{},{},{auc}\n",
            self.aj, self.delta_avg_vis, self.oa, self.fa, self.efa
        )
    }
}

pub fn evaluate(pair: &EvalPair, opts: &EvalOptions) -> Result<MetricReport> {
    check_thresholds(&opts.thresholds)?;
    let thresholds = opts
        .thresholds
        .iter()
        .map(|&t| {
            let c = total_counts(pair, t);
            ThresholdBreakdown {
                threshold: t,
                delta: ratio(c.within, c.ref_visible),
                jaccard: ratio(c.tp, c.tp + c.fp + c.fn_),
            }
        })
        .collect::<Vec<_>>();
    let n = thresholds.len() as f64;
    let times = pair.predicted.times();
    let per_track = pair
        .pairs()
        .enumerate()
        .map(|(q, (p, r))| {
            let (mut d, mut j) = (0.0, 0.0);
            for &t in &opts.thresholds {
                let c = counts(p, r, t);
                d += ratio(c.within, c.ref_visible);
                j += ratio(c.tp, c.tp + c.fp + c.fn_);
            }
            TrackBreakdown {
                query: q,
                delta_avg_vis: d / n,
                aj: j / n,
                oa: ratio(p.iter().zip(r).filter(|(a, b)| a.visible == b.visible).count(), p.len()),
                age: track_age(times, p, r, opts.fa_threshold),
            }
        })
        .collect();
    let (fa, efa) = feature_age(pair, opts.fa_threshold);
    let (rve, speed) = velocity_errors(pair);
    let auc_v = speed_weighted_success(&rve, &speed, &xi_grid(opts.xi_points))
        .ok()
        .map(|(_, a)| a);
    Ok(MetricReport {
        aj: thresholds.iter().map(|t| t.jaccard).sum::<f64>() / n,
        delta_avg_vis: thresholds.iter().map(|t| t.delta).sum::<f64>() / n,
        oa: occlusion_accuracy(pair),
        fa,
        efa,
        auc_v,
        thresholds,
        per_track,
    })
}

/// Straight-loop reference implementations, written independently of the
/// optimized paths above.
pub mod brute {
    use super::EvalPair;

    fn err(pair: &EvalPair, q: usize, t: usize) -> f64 {
        let p = &pair.predicted().tracks()[q][t];
        let r = &pair.reference().tracks()[q][t];
        ((p.x - r.x) * (p.x - r.x) + (p.y - r.y) * (p.y - r.y)).sqrt()
    }

    fn dims(pair: &EvalPair) -> (usize, usize) {
        (pair.reference().num_queries(), pair.reference().num_steps())
    }

    pub fn delta_avg_vis(pair: &EvalPair, thresholds: &[f64]) -> f64 {
        let (nq, nt) = dims(pair);
        let mut sum = 0.0;
        for &th in thresholds {
            let mut hit = 0.0;
            let mut vis = 0.0;
            for q in 0..nq {
                for t in 0..nt {
                    if pair.reference().tracks()[q][t].visible {
                        vis += 1.0;
                        if err(pair, q, t) < th {
                            hit += 1.0;
                        }
                    }
                }
            }
            sum += if vis == 0.0 { 1.0 } else { hit / vis };
        }
        sum / thresholds.len() as f64
    }

    pub fn occlusion_accuracy(pair: &EvalPair) -> f64 {
        let (nq, nt) = dims(pair);
        let mut same = 0.0;
        for q in 0..nq {
            for t in 0..nt {
                if pair.predicted().tracks()[q][t].visible == pair.reference().tracks()[q][t].visible {
                    same += 1.0;
                }
            }
        }
        if nq * nt == 0 {
            1.0
        } else {
            same / (nq * nt) as f64
        }
    }

    pub fn average_jaccard(pair: &EvalPair, thresholds: &[f64]) -> f64 {
        let (nq, nt) = dims(pair);
        let mut sum = 0.0;
        for &th in thresholds {
            let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
            for q in 0..nq {
                for t in 0..nt {
                    let pv = pair.predicted().tracks()[q][t].visible;
                    let rv = pair.reference().tracks()[q][t].visible;
                    let e = err(pair, q, t);
                    if pv && rv && e < th {
                        tp += 1.0;
                    }
                    if pv && (!rv || e >= th) {
                        fp += 1.0;
                    }
                    if rv && (!pv || e >= th) {
                        fneg += 1.0;
                    }
                }
            }
            let den = tp + fp + fneg;
            sum += if den == 0.0 { 1.0 } else { tp / den };
        }
        sum / thresholds.len() as f64
    }

    pub fn feature_age(pair: &EvalPair, threshold: f64) -> (f64, f64) {
        let (nq, nt) = dims(pair);
        let times = pair.reference().times();
        let mut ages = Vec::new();
        for q in 0..nq {
            let mut fail = None;
            for t in 0..nt {
                if err(pair, q, t) > threshold {
                    fail = Some(t);
                    break;
                }
            }
            let age = match fail {
                None => 1.0,
                Some(k) => (times[k] - times[0]) as f64 / (times[nt - 1] - times[0]) as f64,
            };
            ages.push((fail != Some(0), age));
        }
        if ages.is_empty() {
            return (1.0, 1.0);
        }
        let mut fa_sum = 0.0;
        let mut fa_n = 0.0;
        let mut efa_sum = 0.0;
        for (survived, age) in &ages {
            efa_sum += age;
            if *survived {
                fa_sum += age;
                fa_n += 1.0;
            }
        }
        (
            if fa_n == 0.0 { 0.0 } else { fa_sum / fa_n },
            efa_sum / ages.len() as f64,
        )
    }

    pub fn speed_weighted_success(rve: &[f64], gt_speed: &[f64], xi: &[f64]) -> (Vec<f64>, f64) {
        let total: f64 = gt_speed.iter().sum();
        let curve: Vec<f64> = xi
            .iter()
            .map(|&x| {
                let mut s = 0.0;
                for i in 0..rve.len() {
                    if rve[i] < x {
                        s += gt_speed[i];
                    }
                }
                s / total
            })
            .collect();
        let mut auc = 0.0;
        for i in 1..xi.len() {
            auc += (xi[i] - xi[i - 1]) * (curve[i] + curve[i - 1]) / 2.0;
        }
        (curve, auc)
    }
}
