//! Dense event representations over a batch's time bin.
//!
//! All three kinds split `(bin_start, bin_end]` into `B` equal sub-windows and
//! produce an `H×W×B` tensor. Sub-window assignment and in-window offsets are
//! computed in integer microseconds, so events on a sub-window boundary land
//! in the left sub-window (right-closed, like the bins themselves).

use ndarray::{Array2, Array3};
use thiserror::Error;

use crate::events::{Event, EventBatch};
use crate::par;

/// Default number of temporal sub-windows.
pub const DEFAULT_SUB_WINDOWS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReprError {
    #[error("event ({x}, {y}) outside tensor geometry {width}x{height}")]
    GeometryMismatch {
        x: u16,
        y: u16,
        width: usize,
        height: usize,
    },
    #[error("sub-window count must be at least 1")]
    NoSubWindows,
    #[error("bin ({0}, {1}] has zero duration")]
    EmptyBin(u64, u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    TimeSurface,
    CountImage,
    VoxelGrid,
}

impl TensorKind {
    pub const ALL: [TensorKind; 3] = [TensorKind::TimeSurface, TensorKind::CountImage, TensorKind::VoxelGrid];

    pub fn name(self) -> &'static str {
        match self {
            TensorKind::TimeSurface => "time_surface",
            TensorKind::CountImage => "count_image",
            TensorKind::VoxelGrid => "voxel_grid",
        }
    }
}

impl std::str::FromStr for TensorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "time_surface" => Ok(TensorKind::TimeSurface),
            "count_image" => Ok(TensorKind::CountImage),
            "voxel_grid" => Ok(TensorKind::VoxelGrid),
            other => Err(format!("unknown representation `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventTensor {
    /// `H×W×B`, channel innermost.
    pub data: Array3<f64>,
    pub bin_start: u64,
    pub bin_end: u64,
    pub kind: TensorKind,
}

impl EventTensor {
    pub fn zeros(height: usize, width: usize, channels: usize, kind: TensorKind) -> Self {
        Self {
            data: Array3::zeros((height, width, channels)),
            bin_start: 0,
            bin_end: 0,
            kind,
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }
}

pub fn build(
    kind: TensorKind,
    batch: &EventBatch,
    width: usize,
    height: usize,
    b: usize,
) -> Result<EventTensor, ReprError> {
    match kind {
        TensorKind::TimeSurface => sbt_time_surface(batch, width, height, b),
        TensorKind::CountImage => event_count_image(batch, width, height, b),
        TensorKind::VoxelGrid => voxel_grid(batch, width, height, b),
    }
}

fn validate(batch: &EventBatch, width: usize, height: usize, b: usize) -> Result<(), ReprError> {
    if b == 0 {
        return Err(ReprError::NoSubWindows);
    }
    if batch.bin_end <= batch.bin_start {
        return Err(ReprError::EmptyBin(batch.bin_start, batch.bin_end));
    }
    if let Some(e) = batch
        .events
        .iter()
        .find(|e| usize::from(e.x) >= width || usize::from(e.y) >= height)
    {
        return Err(ReprError::GeometryMismatch {
            x: e.x,
            y: e.y,
            width,
            height,
        });
    }
    Ok(())
}

/// Index of the right-closed sub-window holding `t`, plus `(t - s)·B - b·L`,
/// the event's offset inside that sub-window scaled by `B` (integer).
fn sub_window(t: u64, start: u64, len: u64, b: usize) -> (usize, u128) {
    let num = u128::from(t.saturating_sub(start)) * b as u128;
    let len = u128::from(len);
    let idx = if num == 0 { 0 } else { (num.div_ceil(len) - 1) as usize };
    let idx = idx.min(b - 1);
    (idx, num - idx as u128 * len)
}

/// Stacks per-channel planes into `H×W×B`.
fn stack(planes: Vec<Array2<f64>>, height: usize, width: usize) -> Array3<f64> {
    let b = planes.len();
    let mut out = Array3::zeros((height, width, b));
    for (c, plane) in planes.into_iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(2), c).assign(&plane);
    }
    out
}

/// Buckets event indices by sub-window.
fn bucket(batch: &EventBatch, b: usize) -> Vec<Vec<usize>> {
    let len = batch.duration();
    let mut buckets = vec![Vec::new(); b];
    for (i, e) in batch.events.iter().enumerate() {
        buckets[sub_window(e.t, batch.bin_start, len, b).0].push(i);
    }
    buckets
}

/// Maximal-timestamp stacked time surface.
///
/// Each sub-window channel stores `p* · (t* - s_b) / len_b` for the latest
/// event `(t*, p*)` at the pixel; untouched pixels stay 0. Events with equal
/// timestamps at one pixel resolve by canonical order (the last one wins).
pub fn sbt_time_surface(batch: &EventBatch, width: usize, height: usize, b: usize) -> Result<EventTensor, ReprError> {
    validate(batch, width, height, b)?;
    let len = batch.duration();
    let buckets = bucket(batch, b);
    let planes = par::map_slice(&buckets, |idx| {
        let mut plane = Array2::<f64>::zeros((height, width));
        let mut latest = Array2::<Option<Event>>::from_elem((height, width), None);
        for &i in idx {
            let e = batch.events[i];
            let slot = &mut latest[(usize::from(e.y), usize::from(e.x))];
            if slot.is_none_or(|prev| prev <= e) {
                *slot = Some(e);
            }
        }
        for ((r, c), slot) in latest.indexed_iter() {
            if let Some(e) = slot {
                let (_, offset) = sub_window(e.t, batch.bin_start, len, b);
                plane[(r, c)] = e.p.sign() * (offset as f64 / len as f64);
            }
        }
        plane
    });
    Ok(EventTensor {
        data: stack(planes, height, width),
        bin_start: batch.bin_start,
        bin_end: batch.bin_end,
        kind: TensorKind::TimeSurface,
    })
}

/// Signed per-sub-window event count `Σ p`.
pub fn event_count_image(batch: &EventBatch, width: usize, height: usize, b: usize) -> Result<EventTensor, ReprError> {
    validate(batch, width, height, b)?;
    let buckets = bucket(batch, b);
    let planes = par::map_slice(&buckets, |idx| {
        let mut plane = Array2::<f64>::zeros((height, width));
        for &i in idx {
            let e = &batch.events[i];
            plane[(usize::from(e.y), usize::from(e.x))] += e.p.sign();
        }
        plane
    });
    Ok(EventTensor {
        data: stack(planes, height, width),
        bin_start: batch.bin_start,
        bin_end: batch.bin_end,
        kind: TensorKind::CountImage,
    })
}

/// Temporal triangular-kernel weights of one event: `(channel, weight)` pairs
/// summing to 1. Channel centers sit at `(b + 0.5) / B` of the bin; mass
/// before the first or after the last center goes entirely to that channel.
pub fn voxel_weights(t: u64, bin_start: u64, bin_len: u64, b: usize) -> [(usize, f64); 2] {
    // u = τ·B − 0.5 with τ the normalized time, computed as an exact ratio.
    let num = 2 * i128::from(t.saturating_sub(bin_start)) * b as i128 - i128::from(bin_len);
    let den = 2 * i128::from(bin_len);
    let lo = num.div_euclid(den);
    let frac = num.rem_euclid(den) as f64 / den as f64;
    if lo < 0 {
        [(0, 1.0), (0, 0.0)]
    } else if lo as usize >= b - 1 {
        [(b - 1, 1.0), (b - 1, 0.0)]
    } else {
        let lo = lo as usize;
        [(lo, 1.0 - frac), (lo + 1, frac)]
    }
}

/// Voxel grid with nearest-pixel spatial placement and linear temporal
/// interpolation between the two nearest channel centers.
pub fn voxel_grid(batch: &EventBatch, width: usize, height: usize, b: usize) -> Result<EventTensor, ReprError> {
    validate(batch, width, height, b)?;
    let len = batch.duration();
    let mut contributions: Vec<Vec<(usize, f64)>> = vec![Vec::new(); b];
    for e in &batch.events {
        let pix = usize::from(e.y) * width + usize::from(e.x);
        for (c, w) in voxel_weights(e.t, batch.bin_start, len, b) {
            if w != 0.0 {
                contributions[c].push((pix, w * e.p.sign()));
            }
        }
    }
    let planes = par::map_slice(&contributions, |contrib| {
        let mut plane = Array2::<f64>::zeros((height, width));
        let flat = plane.as_slice_mut().expect("standard layout");
        for &(pix, m) in contrib {
            flat[pix] += m;
        }
        plane
    });
    Ok(EventTensor {
        data: stack(planes, height, width),
        bin_start: batch.bin_start,
        bin_end: batch.bin_end,
        kind: TensorKind::VoxelGrid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Polarity;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ev(t: u64, x: u16, y: u16, p: i8) -> Event {
        Event::new(t, x, y, Polarity::from_i8(p).unwrap())
    }

    fn random_batch(seed: u64, n: usize, w: u16, h: u16, start: u64, end: u64) -> EventBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut events: Vec<Event> = (0..n)
            .map(|_| {
                ev(
                    rng.random_range(start + 1..=end),
                    rng.random_range(0..w),
                    rng.random_range(0..h),
                    if rng.random_bool(0.5) { 1 } else { -1 },
                )
            })
            .collect();
        events.sort();
        EventBatch::new(start, end, events)
    }

    #[test]
    fn empty_batch_gives_zeros() {
        let b = EventBatch::new(0, 1000, vec![]);
        for kind in [TensorKind::TimeSurface, TensorKind::CountImage, TensorKind::VoxelGrid] {
            let t = build(kind, &b, 6, 4, 5).unwrap();
            assert_eq!(t.data.dim(), (4, 6, 5));
            assert!(t.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn time_surface_endpoint_is_one() {
        // 5 sub-windows of 200 µs; event at the end of sub-window 2.
        let b = EventBatch::new(1000, 2000, vec![ev(1600, 2, 1, 1)]);
        let t = sbt_time_surface(&b, 4, 3, 5).unwrap();
        assert_eq!(t.data[(1, 2, 2)], 1.0);
        assert_eq!(t.data.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn time_surface_later_event_wins() {
        // Sub-window 0 spans (0, 1000]; events at 30% and 80%.
        let b = EventBatch::new(0, 5000, vec![ev(300, 1, 1, 1), ev(800, 1, 1, -1)]);
        let t = sbt_time_surface(&b, 3, 3, 5).unwrap();
        assert!((t.data[(1, 1, 0)] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn time_surface_matches_scalar_oracle() {
        let batch = random_batch(5, 400, 8, 6, 10_000, 17_000);
        let t = sbt_time_surface(&batch, 8, 6, 5).unwrap();
        let len = 7000.0;
        let sub = len / 5.0;
        for y in 0..6u16 {
            for x in 0..8u16 {
                for c in 0..5 {
                    let s = 10_000.0 + c as f64 * sub;
                    let latest = batch
                        .events
                        .iter()
                        .filter(|e| e.x == x && e.y == y)
                        .filter(|e| (e.t as f64) > s && (e.t as f64) <= s + sub)
                        .max();
                    let expected = latest.map_or(0.0, |e| e.p.sign() * (e.t as f64 - s) / sub);
                    let got = t.data[(y as usize, x as usize, c)];
                    assert!((got - expected).abs() < 1e-12, "({x},{y},{c}) {got} vs {expected}");
                }
            }
        }
    }

    #[test]
    fn count_image_arithmetic() {
        let b = EventBatch::new(
            0,
            100,
            vec![ev(10, 0, 0, 1), ev(11, 0, 0, 1), ev(12, 0, 0, -1), ev(13, 0, 0, 1)],
        );
        let t = event_count_image(&b, 2, 2, 5).unwrap();
        assert_eq!(t.data[(0, 0, 0)], 2.0);
    }

    #[test]
    fn count_image_matches_brute_force() {
        let batch = random_batch(9, 3000, 10, 7, 0, 9999);
        let t = event_count_image(&batch, 10, 7, 4).unwrap();
        let mut brute = Array3::<f64>::zeros((7, 10, 4));
        for e in &batch.events {
            let c = (0..4).find(|&c| e.t as f64 <= (c as f64 + 1.0) * 9999.0 / 4.0).unwrap();
            brute[(e.y as usize, e.x as usize, c)] += e.p.sign();
        }
        assert_eq!(t.data, brute);
    }

    #[test]
    fn voxel_kernel_peak_and_midpoint() {
        // B=5, L=1000: centers at 100, 300, 500, ...
        let b = EventBatch::new(0, 1000, vec![ev(300, 0, 0, -1), ev(400, 1, 0, 1)]);
        let t = voxel_grid(&b, 2, 1, 5).unwrap();
        assert_eq!(t.data[(0, 0, 1)], -1.0);
        assert_eq!(t.data[(0, 1, 1)], 0.5);
        assert_eq!(t.data[(0, 1, 2)], 0.5);
    }

    #[test]
    fn voxel_per_event_mass_matches_kernel_oracle() {
        let batch = random_batch(21, 2000, 9, 9, 500, 4500);
        let t = voxel_grid(&batch, 9, 9, 5).unwrap();
        let mut brute = Array3::<f64>::zeros((9, 9, 5));
        for e in &batch.events {
            let tau = (e.t - 500) as f64 / 4000.0;
            let mut mass = 0.0;
            for c in 0..5 {
                let center = (c as f64 + 0.5) / 5.0;
                let mut w = (1.0 - (tau - center).abs() * 5.0).max(0.0);
                if (c == 0 && tau < center) || (c == 4 && tau > center) {
                    w = 1.0;
                }
                mass += w;
                brute[(e.y as usize, e.x as usize, c)] += w * e.p.sign();
            }
            assert!((mass - 1.0).abs() < 1e-12);
        }
        assert!(t.data.iter().zip(brute.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn geometry_and_parameter_errors() {
        let b = EventBatch::new(0, 10, vec![ev(5, 4, 0, 1)]);
        assert!(matches!(
            sbt_time_surface(&b, 4, 4, 5),
            Err(ReprError::GeometryMismatch { .. })
        ));
        assert_eq!(event_count_image(&b, 8, 8, 0).unwrap_err(), ReprError::NoSubWindows);
        let z = EventBatch::new(10, 10, vec![]);
        assert!(matches!(voxel_grid(&z, 8, 8, 5), Err(ReprError::EmptyBin(..))));
    }

    fn shifted(batch: &EventBatch, dx: u16, dy: u16) -> EventBatch {
        let events = batch
            .events
            .iter()
            .map(|e| Event::new(e.t, e.x + dx, e.y + dy, e.p))
            .collect();
        EventBatch::new(batch.bin_start, batch.bin_end, events)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn time_surface_idempotent_under_duplication(seed in 0u64..1000, dup in 0usize..50) {
            let batch = random_batch(seed, 60, 6, 6, 0, 5000);
            let mut doubled = batch.clone();
            let pick = batch.events[dup % batch.events.len()];
            doubled.events.push(pick);
            doubled.events.sort();
            let a = sbt_time_surface(&batch, 6, 6, 5).unwrap();
            let b = sbt_time_surface(&doubled, 6, 6, 5).unwrap();
            prop_assert_eq!(a.data, b.data);
        }

        #[test]
        fn voxel_mass_conserved(seed in 0u64..1000, b in 1usize..8) {
            let batch = random_batch(seed, 300, 7, 5, 100, 3337);
            let t = voxel_grid(&batch, 7, 5, b).unwrap();
            prop_assert!((t.data.sum() - batch.net_polarity() as f64).abs() < 1e-9);
        }

        #[test]
        fn translation_equivariance(seed in 0u64..1000, dx in 0u16..4, dy in 0u16..3) {
            let batch = random_batch(seed, 80, 6, 5, 0, 4000);
            let moved = shifted(&batch, dx, dy);
            for kind in [TensorKind::TimeSurface, TensorKind::CountImage, TensorKind::VoxelGrid] {
                let a = build(kind, &batch, 10, 8, 5).unwrap();
                let b = build(kind, &moved, 10, 8, 5).unwrap();
                for ((y, x, c), v) in a.data.indexed_iter() {
                    if y + (dy as usize) < 8 && x + (dx as usize) < 10 {
                        prop_assert_eq!(*v, b.data[(y + dy as usize, x + dx as usize, c)]);
                    }
                }
                prop_assert!((a.data.sum() - b.data.sum()).abs() < 1e-9);
            }
        }

        #[test]
        fn count_image_is_additive(seed in 0u64..1000, split in 1usize..99) {
            let batch = random_batch(seed, 100, 5, 5, 0, 1000);
            let (l, r) = batch.events.split_at(split);
            let a = EventBatch::new(0, 1000, l.to_vec());
            let b = EventBatch::new(0, 1000, r.to_vec());
            let whole = event_count_image(&batch, 5, 5, 5).unwrap().data;
            let sum = event_count_image(&a, 5, 5, 5).unwrap().data + event_count_image(&b, 5, 5, 5).unwrap().data;
            prop_assert_eq!(whole, sum);
        }

        #[test]
        fn time_surface_values_bounded(seed in 0u64..1000) {
            let batch = random_batch(seed, 200, 5, 5, 0, 777);
            let t = sbt_time_surface(&batch, 5, 5, 3).unwrap();
            prop_assert!(t.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
