//! Frame/event fusion: tokenizers, locality-biased cross-attention, the
//! transient state machine, temporal self-attention and the pyramid decoder.
//!
//! Tokens live on the patch grid of the frame. Event tensors are tokenized
//! on the same grid so a token's neighborhood is a fixed set of grid offsets.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use thiserror::Error;

use crate::events::EventBatch;
use crate::nn::{layer_norm, softmax_in_place, spatial_encoding, temporal_encodings, Linear, LinearGrad};
use crate::par;
use crate::repr::{sbt_time_surface, EventTensor, ReprError, TensorKind};
use crate::weights::{DecoderWeights, LocalAttention, TemporalAttentionWeights, UpdaterWeights, WeightBundle};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token {token} has an empty neighborhood")]
    EmptyNeighborhood { token: usize },
    #[error("backward pass called without a cached forward pass")]
    MissingForwardCache,
    #[error("batch ending at {batch_end} precedes state time {state_time}")]
    TimeRegression { state_time: u64, batch_end: u64 },
    #[error(transparent)]
    Repr(#[from] ReprError),
}

type Result<T> = std::result::Result<T, FusionError>;

/// `N×d` token values on a `rows×cols` grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokens {
    pub values: Array2<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Tokens {
    pub fn new(values: Array2<f64>, rows: usize, cols: usize) -> Result<Self> {
        if values.nrows() != rows * cols {
            return Err(FusionError::ShapeMismatch(format!(
                "{} tokens on a {rows}x{cols} grid",
                values.nrows()
            )));
        }
        Ok(Self { values, rows, cols })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn coord(&self, n: usize) -> (usize, usize) {
        (n / self.cols, n % self.cols)
    }
}

/// The fused representation maintained between frames.
#[derive(Debug, Clone, PartialEq)]
pub struct TransientState {
    pub tokens: Tokens,
    pub state_time: u64,
    pub frame_anchor_time: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    /// `h×w×C`.
    pub data: Array3<f64>,
    /// Input pixels per level cell.
    pub stride: usize,
}

/// Three fused feature maps, coarse (stride 8) to fine (stride 2).
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<PyramidLevel>,
}

pub fn pyramid_strides(patch: usize) -> [usize; 3] {
    [patch, patch / 2, patch / 4]
}

// ---------------------------------------------------------------------------
// Tokenizers

fn patch_embed(input: ArrayView3<f64>, patch: usize, embed: &Linear) -> Result<Tokens> {
    let (h, w, c) = input.dim();
    if h % patch != 0 || w % patch != 0 || h == 0 || w == 0 {
        return Err(FusionError::ShapeMismatch(format!(
            "input {h}x{w} is not divisible into {patch}x{patch} patches"
        )));
    }
    if patch * patch * c != embed.fan_in() {
        return Err(FusionError::ShapeMismatch(format!(
            "patch of {patch}x{patch}x{c} values vs embedding fan-in {}",
            embed.fan_in()
        )));
    }
    let (rows, cols) = (h / patch, w / patch);
    let mut flat = Array2::zeros((rows * cols, patch * patch * c));
    for (n, mut row) in flat.rows_mut().into_iter().enumerate() {
        let (r, col) = (n / cols, n % cols);
        let block = input.slice(s![r * patch..(r + 1) * patch, col * patch..(col + 1) * patch, ..]);
        row.iter_mut().zip(block.iter()).for_each(|(dst, src)| *dst = *src);
    }
    Tokens::new(embed.forward(flat.view()), rows, cols)
}

/// Frame tokenizer: non-overlapping patches flattened in `(y, x, channel)`
/// order, projected to `d`.
pub fn tokenize_frame(image: ArrayView3<f64>, bundle: &WeightBundle) -> Result<Tokens> {
    patch_embed(image, bundle.config.patch, &bundle.fusion.image_embed)
}

/// Event tokenizer over the `B` tensor channels, on the frame's patch grid.
pub fn tokenize_events(tensor: &EventTensor, bundle: &WeightBundle) -> Result<Tokens> {
    patch_embed(tensor.data.view(), bundle.config.patch, &bundle.fusion.event_embed)
}

// ---------------------------------------------------------------------------
// Local cross-attention

/// Grid neighbors of token `j` within Chebyshev distance `radius`, as
/// `(token index, offset index)`; offsets are numbered row-major over
/// `(dy, dx) ∈ [-r, r]²`.
pub fn neighborhood(rows: usize, cols: usize, j: usize, radius: usize) -> Vec<(usize, usize)> {
    let (r, c) = ((j / cols) as isize, (j % cols) as isize);
    let rad = radius as isize;
    let span = 2 * radius + 1;
    let mut out = Vec::with_capacity(span * span);
    for dy in -rad..=rad {
        for dx in -rad..=rad {
            let (nr, nc) = (r + dy, c + dx);
            if nr >= 0 && nc >= 0 && (nr as usize) < rows && (nc as usize) < cols {
                let offset = (dy + rad) as usize * span + (dx + rad) as usize;
                out.push((nr as usize * cols + nc as usize, offset));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
struct AttentionMap {
    /// Per query, the neighbor list and matching attention weights.
    neighbors: Vec<Vec<(usize, usize)>>,
    weights: Vec<Vec<f64>>,
    readout: Array2<f64>,
}

fn local_attend(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    rows: usize,
    cols: usize,
    radius: usize,
    bias: &Array1<f64>,
) -> Result<AttentionMap> {
    type AttendedRow = (Vec<(usize, usize)>, Vec<f64>, Array1<f64>);
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let per_query: Vec<Result<AttendedRow>> = par::map_range(q.nrows(), |j| {
        let nb = neighborhood(rows, cols, j, radius);
        if nb.is_empty() {
            return Err(FusionError::EmptyNeighborhood { token: j });
        }
        let mut a: Vec<f64> = nb
            .iter()
            .map(|&(i, o)| q.row(j).dot(&k.row(i)) * scale + bias[o])
            .collect();
        softmax_in_place(&mut a);
        let mut out = Array1::zeros(v.ncols());
        for (&(i, _), &w) in nb.iter().zip(&a) {
            out.scaled_add(w, &v.row(i));
        }
        Ok((nb, a, out))
    });
    let mut readout = Array2::zeros((q.nrows(), v.ncols()));
    let mut neighbors = Vec::with_capacity(q.nrows());
    let mut weights = Vec::with_capacity(q.nrows());
    for (j, res) in per_query.into_iter().enumerate() {
        let (nb, a, out) = res?;
        readout.row_mut(j).assign(&out);
        neighbors.push(nb);
        weights.push(a);
    }
    Ok(AttentionMap {
        neighbors,
        weights,
        readout,
    })
}

fn check_same_grid(a: &Tokens, b: &Tokens) -> Result<()> {
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(FusionError::ShapeMismatch(format!(
            "token grids {}x{} and {}x{} differ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    if a.dim() != b.dim() {
        return Err(FusionError::ShapeMismatch(format!(
            "token widths {} and {} differ",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Activations kept by [`clwf_forward`] for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ClwfCache {
    event_tokens: Array2<f64>,
    image_tokens: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attention: AttentionMap,
}

impl ClwfCache {
    /// Dense `N_E×N_I` attention matrix; entries outside a query's
    /// neighborhood are exactly zero.
    pub fn attention_matrix(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.q.nrows(), self.k.nrows()));
        for (j, (nb, w)) in self.attention.neighbors.iter().zip(&self.attention.weights).enumerate() {
            for (&(i, _), &x) in nb.iter().zip(w) {
                a[(j, i)] = x;
            }
        }
        a
    }

    /// Neighborhood of event token `j` as image-token indices.
    pub fn neighbors(&self, j: usize) -> Vec<usize> {
        self.attention.neighbors[j].iter().map(|&(i, _)| i).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClwfOutput {
    pub tokens: Tokens,
    pub cache: ClwfCache,
}

/// Cross-modal locally weighted fusion.
///
/// Each event token `j` queries the image tokens `i` in its grid
/// neighborhood: `A_ji = softmax_i(⟨q_j, k_i⟩/√d + M[offset(j, i)])` and
/// `f_j = f^E_j + Σ_i A_ji v_i`.
pub fn clwf_forward(
    event_tokens: &Tokens,
    image_tokens: &Tokens,
    radius: usize,
    w: &LocalAttention,
) -> Result<ClwfOutput> {
    check_same_grid(event_tokens, image_tokens)?;
    if w.locality_bias.len() != (2 * radius + 1).pow(2) {
        return Err(FusionError::ShapeMismatch(format!(
            "locality table has {} entries, radius {radius} needs {}",
            w.locality_bias.len(),
            (2 * radius + 1).pow(2)
        )));
    }
    let q = w.query.forward(event_tokens.values.view());
    let k = w.key.forward(image_tokens.values.view());
    let v = w.value.forward(image_tokens.values.view());
    let attention = local_attend(
        &q,
        &k,
        &v,
        event_tokens.rows,
        event_tokens.cols,
        radius,
        &w.locality_bias,
    )?;
    let fused = &event_tokens.values + &attention.readout;
    Ok(ClwfOutput {
        tokens: Tokens::new(fused, event_tokens.rows, event_tokens.cols)?,
        cache: ClwfCache {
            event_tokens: event_tokens.values.clone(),
            image_tokens: image_tokens.values.clone(),
            q,
            k,
            v,
            attention,
        },
    })
}

/// [`clwf_forward`] wrapped as a fresh transient state at `state_time`.
pub fn clwf_fuse(
    event_tokens: &Tokens,
    image_tokens: &Tokens,
    radius: usize,
    w: &LocalAttention,
    state_time: u64,
) -> Result<TransientState> {
    Ok(TransientState {
        tokens: clwf_forward(event_tokens, image_tokens, radius, w)?.tokens,
        state_time,
        frame_anchor_time: state_time,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClwfGrads {
    pub event_tokens: Array2<f64>,
    pub image_tokens: Array2<f64>,
    pub query: LinearGrad,
    pub key: LinearGrad,
    pub value: LinearGrad,
    pub locality_bias: Array1<f64>,
}

/// Gradients of `Σ upstream ⊙ f` through [`clwf_forward`].
pub fn clwf_backward(cache: Option<&ClwfCache>, w: &LocalAttention, upstream: ArrayView2<f64>) -> Result<ClwfGrads> {
    let cache = cache.ok_or(FusionError::MissingForwardCache)?;
    if upstream.dim() != cache.event_tokens.dim() {
        return Err(FusionError::ShapeMismatch(format!(
            "upstream {:?} vs output {:?}",
            upstream.dim(),
            cache.event_tokens.dim()
        )));
    }
    let scale = 1.0 / (cache.q.ncols() as f64).sqrt();
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    let mut dbias = Array1::zeros(w.locality_bias.raw_dim());
    for (j, (nb, a)) in cache
        .attention
        .neighbors
        .iter()
        .zip(&cache.attention.weights)
        .enumerate()
    {
        let g = upstream.row(j);
        let da: Vec<f64> = nb.iter().map(|&(i, _)| g.dot(&cache.v.row(i))).collect();
        let mean: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
        for (n, &(i, o)) in nb.iter().enumerate() {
            dv.row_mut(i).scaled_add(a[n], &g);
            let ds = a[n] * (da[n] - mean);
            dbias[o] += ds;
            dq.row_mut(j).scaled_add(ds * scale, &cache.k.row(i));
            dk.row_mut(i).scaled_add(ds * scale, &cache.q.row(j));
        }
    }
    let mut query = LinearGrad::zeros_like(&w.query);
    let mut key = LinearGrad::zeros_like(&w.key);
    let mut value = LinearGrad::zeros_like(&w.value);
    let d_event = upstream.to_owned() + query.accumulate(&w.query, cache.event_tokens.view(), dq.view());
    let d_image = key.accumulate(&w.key, cache.image_tokens.view(), dk.view())
        + value.accumulate(&w.value, cache.image_tokens.view(), dv.view());
    Ok(ClwfGrads {
        event_tokens: d_event,
        image_tokens: d_image,
        query,
        key,
        value,
        locality_bias: dbias,
    })
}

// ---------------------------------------------------------------------------
// Transient asynchronous fusion

fn frame_geometry(image: ArrayView3<f64>, bundle: &WeightBundle) -> Result<(usize, usize)> {
    let (h, w, c) = image.dim();
    if c != bundle.config.image_channels {
        return Err(FusionError::ShapeMismatch(format!(
            "frame has {c} channels, model expects {}",
            bundle.config.image_channels
        )));
    }
    Ok((h, w))
}

/// Time surface of `batch`, or all zeros when the batch holds no events
/// (including zero-length windows, which the representation rejects).
pub fn batch_tensor(batch: &EventBatch, width: usize, height: usize, bins: usize) -> Result<EventTensor> {
    if batch.is_empty() {
        return Ok(EventTensor::zeros(height, width, bins, TensorKind::TimeSurface));
    }
    Ok(sbt_time_surface(batch, width, height, bins)?)
}

/// State initialization at a frame: fuse the frame with its exposure-window
/// events. `exposure.bin_end` is the frame time.
pub fn taf_init(frame: ArrayView3<f64>, exposure: &EventBatch, bundle: &WeightBundle) -> Result<TransientState> {
    let (h, w) = frame_geometry(frame, bundle)?;
    let tensor = batch_tensor(exposure, w, h, bundle.config.bins)?;
    taf_init_with_tensor(frame, exposure.bin_end, &tensor, bundle)
}

/// [`taf_init`] with a precomputed exposure-window tensor.
pub fn taf_init_with_tensor(
    frame: ArrayView3<f64>,
    frame_time: u64,
    exposure_tensor: &EventTensor,
    bundle: &WeightBundle,
) -> Result<TransientState> {
    frame_geometry(frame, bundle)?;
    let event_tokens = tokenize_events(exposure_tensor, bundle)?;
    let image_tokens = tokenize_frame(frame, bundle)?;
    clwf_fuse(
        &event_tokens,
        &image_tokens,
        bundle.config.radius,
        &bundle.fusion.clwf,
        frame_time,
    )
}

/// Event-driven residual refinement of the state with the next batch.
///
/// An empty batch skips the update: tokens are returned unchanged and only
/// `state_time` advances.
pub fn taf_update(state: &TransientState, batch: &EventBatch, bundle: &WeightBundle) -> Result<TransientState> {
    check_time(state, batch)?;
    if batch.is_empty() {
        return Ok(advance(state, batch.bin_end));
    }
    let p = bundle.config.patch;
    let tensor = sbt_time_surface(batch, state.tokens.cols * p, state.tokens.rows * p, bundle.config.bins)?;
    taf_update_with_tensor(state, batch, &tensor, bundle)
}

fn check_time(state: &TransientState, batch: &EventBatch) -> Result<()> {
    if batch.bin_end < state.state_time {
        return Err(FusionError::TimeRegression {
            state_time: state.state_time,
            batch_end: batch.bin_end,
        });
    }
    Ok(())
}

fn advance(state: &TransientState, t: u64) -> TransientState {
    TransientState {
        tokens: state.tokens.clone(),
        state_time: t,
        frame_anchor_time: state.frame_anchor_time,
    }
}

/// [`taf_update`] with the batch's tensor already computed.
pub fn taf_update_with_tensor(
    state: &TransientState,
    batch: &EventBatch,
    tensor: &EventTensor,
    bundle: &WeightBundle,
) -> Result<TransientState> {
    check_time(state, batch)?;
    if batch.is_empty() {
        return Ok(advance(state, batch.bin_end));
    }
    let event_tokens = tokenize_events(tensor, bundle)?;
    check_same_grid(&state.tokens, &event_tokens)?;
    let tokens = updater_forward(
        &state.tokens,
        &event_tokens,
        bundle.config.radius,
        &bundle.fusion.updater,
    )?;
    Ok(TransientState {
        tokens,
        state_time: batch.bin_end,
        frame_anchor_time: state.frame_anchor_time,
    })
}

/// `R + (A·V) W_o + b_o` with queries from `LN(R)` and keys/values from the
/// event tokens, restricted to the same grid neighborhoods as fusion.
pub fn updater_forward(state: &Tokens, events: &Tokens, radius: usize, w: &UpdaterWeights) -> Result<Tokens> {
    let normed = layer_norm(state.values.view());
    let q = w.query.forward(normed.view());
    let k = w.key.forward(events.values.view());
    let v = w.value.forward(events.values.view());
    let att = local_attend(&q, &k, &v, state.rows, state.cols, radius, &w.locality_bias)?;
    let out = &state.values + &w.output.forward(att.readout.view());
    Tokens::new(out, state.rows, state.cols)
}

// ---------------------------------------------------------------------------
// Temporal self-attention

/// Activations of one attention pass over a `T×d` sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AttendCache {
    values_in: Array2<f64>,
    qk_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    heads: Array2<f64>,
}

impl AttendCache {
    pub fn attention(&self) -> &Array2<f64> {
        &self.attn
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParamGrads {
    pub query: LinearGrad,
    pub key: LinearGrad,
    pub value: LinearGrad,
    pub output: LinearGrad,
}

impl AttentionParamGrads {
    pub fn zeros_like(w: &TemporalAttentionWeights) -> Self {
        Self {
            query: LinearGrad::zeros_like(&w.query),
            key: LinearGrad::zeros_like(&w.key),
            value: LinearGrad::zeros_like(&w.value),
            output: LinearGrad::zeros_like(&w.output),
        }
    }

    fn add(&mut self, o: &Self) {
        self.query.add(&o.query);
        self.key.add(&o.key);
        self.value.add(&o.value);
        self.output.add(&o.output);
    }
}

/// Full self-attention branch over a sequence: queries and keys read
/// `qk_in`, values read `values_in`; returns `softmax(QKᵀ/√d) V W_o + b_o`
/// without the residual.
pub fn attend_forward(
    values_in: ArrayView2<f64>,
    qk_in: ArrayView2<f64>,
    w: &TemporalAttentionWeights,
) -> (Array2<f64>, AttendCache) {
    let q = w.query.forward(qk_in);
    let k = w.key.forward(qk_in);
    let v = w.value.forward(values_in);
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let attn = crate::nn::softmax_rows(q.dot(&k.t()) * scale);
    let heads = attn.dot(&v);
    let out = w.output.forward(heads.view());
    (
        out,
        AttendCache {
            values_in: values_in.to_owned(),
            qk_in: qk_in.to_owned(),
            q,
            k,
            v,
            attn,
            heads,
        },
    )
}

/// Backward of [`attend_forward`]: returns `(d values_in, d qk_in, params)`.
pub fn attend_backward(
    cache: &AttendCache,
    w: &TemporalAttentionWeights,
    d_out: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, AttentionParamGrads) {
    let mut g = AttentionParamGrads::zeros_like(w);
    let d_heads = g.output.accumulate(&w.output, cache.heads.view(), d_out);
    let d_attn = d_heads.dot(&cache.v.t());
    let dv = cache.attn.t().dot(&d_heads);
    let mut ds = cache.attn.clone();
    for (mut row, drow) in ds.rows_mut().into_iter().zip(d_attn.rows()) {
        let mean: f64 = row.iter().zip(drow.iter()).map(|(a, d)| a * d).sum();
        row.iter_mut().zip(drow.iter()).for_each(|(a, d)| *a *= d - mean);
    }
    let scale = 1.0 / (cache.q.ncols() as f64).sqrt();
    let dq = ds.dot(&cache.k) * scale;
    let dk = ds.t().dot(&cache.q) * scale;
    let d_values = g.value.accumulate(&w.value, cache.values_in.view(), dv.view());
    let d_qk = g.query.accumulate(&w.query, cache.qk_in.view(), dq.view())
        + g.key.accumulate(&w.key, cache.qk_in.view(), dk.view());
    (d_values, d_qk, g)
}

/// Positional encodings added to the query/key input at window step `t` for
/// token `(row, col)`.
fn positional(len: usize, tokens: &Tokens, n: usize) -> Array2<f64> {
    let d = tokens.dim();
    let (r, c) = tokens.coord(n);
    temporal_encodings(len, d) + &spatial_encoding(r, c, d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalForward {
    pub outputs: Vec<TransientState>,
    caches: Vec<AttendCache>,
}

impl TemporalForward {
    /// Attention over window steps for token position `n`.
    pub fn attention(&self, n: usize) -> &Array2<f64> {
        self.caches[n].attention()
    }
}

fn check_window(states: &[TransientState]) -> Result<()> {
    let first = states
        .first()
        .ok_or_else(|| FusionError::ShapeMismatch("temporal attention needs at least one state".into()))?;
    if states.iter().any(|s| {
        (s.tokens.rows, s.tokens.cols, s.tokens.dim()) != (first.tokens.rows, first.tokens.cols, first.tokens.dim())
    }) {
        return Err(FusionError::ShapeMismatch(
            "states in a window must share a token grid".into(),
        ));
    }
    Ok(())
}

/// Per-token-position self-attention across the window with a residual.
///
/// Sinusoidal temporal (window step) and spatial (token grid) encodings are
/// added to the query/key input only; values read the raw state, so a
/// window of identical states stays identical.
pub fn temporal_attention_forward(states: &[TransientState], w: &TemporalAttentionWeights) -> Result<TemporalForward> {
    check_window(states)?;
    let len = states.len();
    let proto = &states[0].tokens;
    let per_pos = par::map_range(proto.len(), |n| {
        let mut x = Array2::zeros((len, proto.dim()));
        for (t, s) in states.iter().enumerate() {
            x.row_mut(t).assign(&s.tokens.values.row(n));
        }
        let qk = &x + &positional(len, proto, n);
        let (branch, cache) = attend_forward(x.view(), qk.view(), w);
        (x + branch, cache)
    });
    let mut outputs: Vec<TransientState> = states.to_vec();
    let mut caches = Vec::with_capacity(per_pos.len());
    for (n, (y, cache)) in per_pos.into_iter().enumerate() {
        for (t, out) in outputs.iter_mut().enumerate() {
            out.tokens.values.row_mut(n).assign(&y.row(t));
        }
        caches.push(cache);
    }
    Ok(TemporalForward { outputs, caches })
}

pub fn temporal_attention(states: &[TransientState], w: &TemporalAttentionWeights) -> Result<Vec<TransientState>> {
    Ok(temporal_attention_forward(states, w)?.outputs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalGrads {
    /// Gradient w.r.t. each input state's token values.
    pub states: Vec<Array2<f64>>,
    pub params: AttentionParamGrads,
}

/// Gradients of `Σ_t upstream[t] ⊙ outputs[t].tokens` through
/// [`temporal_attention_forward`].
pub fn temporal_attention_backward(
    forward: Option<&TemporalForward>,
    w: &TemporalAttentionWeights,
    upstream: &[Array2<f64>],
) -> Result<TemporalGrads> {
    let fwd = forward.ok_or(FusionError::MissingForwardCache)?;
    if upstream.len() != fwd.outputs.len()
        || upstream
            .iter()
            .zip(&fwd.outputs)
            .any(|(u, o)| u.dim() != o.tokens.values.dim())
    {
        return Err(FusionError::ShapeMismatch(
            "upstream must match the forward outputs".into(),
        ));
    }
    let per_pos = par::map_range(fwd.caches.len(), |n| {
        let mut g = Array2::zeros((upstream.len(), upstream[0].ncols()));
        for (t, u) in upstream.iter().enumerate() {
            g.row_mut(t).assign(&u.row(n));
        }
        let (dv, dqk, params) = attend_backward(&fwd.caches[n], w, g.view());
        (g + dv + dqk, params)
    });
    let mut states: Vec<Array2<f64>> = upstream.iter().map(|u| Array2::zeros(u.raw_dim())).collect();
    let mut params = AttentionParamGrads::zeros_like(w);
    for (n, (dx, p)) in per_pos.into_iter().enumerate() {
        for (t, s) in states.iter_mut().enumerate() {
            s.row_mut(n).assign(&dx.row(t));
        }
        params.add(&p);
    }
    Ok(TemporalGrads { states, params })
}

// ---------------------------------------------------------------------------
// Pyramid decoding

fn apply_linear3(x: &Array3<f64>, l: &Linear) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let flat = x.view().into_shape_with_order((h * w, c)).expect("contiguous");
    l.forward(flat)
        .into_shape_with_order((h, w, l.fan_out()))
        .expect("row count preserved")
}

/// Nearest-neighbor 2× upsampling of an `h×w×C` map.
pub fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = x.dim();
    Array3::from_shape_fn((2 * h, 2 * w, c), |(r, col, ch)| x[(r / 2, col / 2, ch)])
}

fn avg_pool(x: ArrayView3<f64>, stride: usize) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let (ph, pw) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut out = Array3::zeros((ph, pw, c));
    for r in 0..ph {
        for col in 0..pw {
            let block = x.slice(s![
                r * stride..((r + 1) * stride).min(h),
                col * stride..((col + 1) * stride).min(w),
                ..
            ]);
            let n = (block.dim().0 * block.dim().1) as f64;
            out.slice_mut(s![r, col, ..])
                .assign(&(block.sum_axis(Axis(0)).sum_axis(Axis(0)) / n));
        }
    }
    out
}

/// Encoder skip features: the frame and event tensor, average-pooled to each
/// level's stride and projected to that level's width.
pub fn encode_skips(frame: ArrayView3<f64>, tensor: &EventTensor, bundle: &WeightBundle) -> Result<Vec<Array3<f64>>> {
    let (h, w, _) = frame.dim();
    if tensor.data.dim().0 != h || tensor.data.dim().1 != w {
        return Err(FusionError::ShapeMismatch(format!(
            "frame {h}x{w} vs event tensor {}x{}",
            tensor.height(),
            tensor.width()
        )));
    }
    let stacked = ndarray::concatenate(Axis(2), &[frame, tensor.data.view()])
        .map_err(|e| FusionError::ShapeMismatch(e.to_string()))?;
    Ok(pyramid_strides(bundle.config.patch)
        .iter()
        .zip(&bundle.fusion.decoder.skip)
        .map(|(&s, proj)| apply_linear3(&avg_pool(stacked.view(), s), proj))
        .collect())
}

/// Three-stage decoder: `P0 = mix0(R) + skip0`, `P1 = mix1(up2(P0)) + skip1`,
/// `P2 = mix2(up2(P1)) + skip2`.
pub fn decode_pyramid(
    state: &TransientState,
    skips: &[Array3<f64>],
    w: &DecoderWeights,
    patch: usize,
) -> Result<FeaturePyramid> {
    let t = &state.tokens;
    if skips.len() != 3 || w.mix.len() != 3 {
        return Err(FusionError::ShapeMismatch("decoder needs three levels".into()));
    }
    let grid = t
        .values
        .clone()
        .into_shape_with_order((t.rows, t.cols, t.dim()))
        .map_err(|e| FusionError::ShapeMismatch(e.to_string()))?;
    let strides = pyramid_strides(patch);
    let mut levels = Vec::with_capacity(3);
    let mut current = grid;
    for (l, (mix, skip)) in w.mix.iter().zip(skips).enumerate() {
        if l > 0 {
            current = upsample2(&current);
        }
        if current.dim().2 != mix.fan_in() {
            return Err(FusionError::ShapeMismatch(format!(
                "level {l} input has {} channels, mixer expects {}",
                current.dim().2,
                mix.fan_in()
            )));
        }
        let mixed = apply_linear3(&current, mix);
        if mixed.dim() != skip.dim() {
            return Err(FusionError::ShapeMismatch(format!(
                "level {l} is {:?}, skip is {:?}",
                mixed.dim(),
                skip.dim()
            )));
        }
        current = mixed + skip;
        levels.push(PyramidLevel {
            data: current.clone(),
            stride: strides[l],
        });
    }
    Ok(FeaturePyramid { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Event, Polarity};
    use crate::weights::{InitScheme, ModelConfig};
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d: 8,
            patch: 8,
            radius: 1,
            bins: 3,
            pyramid_channels: [8, 8, 8],
            corr_radius: 1,
            corr_embed: 4,
            tracker_width: 8,
            motion_freqs: 2,
            window: 4,
            ..ModelConfig::default()
        }
    }

    fn random_tokens(rng: &mut ChaCha8Rng, rows: usize, cols: usize, d: usize) -> Tokens {
        let v = Array2::from_shape_fn((rows * cols, d), |_| rng.random_range(-1.0..1.0));
        Tokens::new(v, rows, cols).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Array3<f64> {
        Array3::from_shape_fn((h, w, c), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_tokens() {
        let mut b = WeightBundle::init(&tiny_config(), 1, InitScheme::ZeroResidual).unwrap();
        b.fusion.image_embed.bias.fill(0.0);
        let t = tokenize_frame(Array3::zeros((16, 24, 3)).view(), &b).unwrap();
        assert!(t.values.iter().all(|&v| v == 0.0));
        assert_eq!((t.rows, t.cols), (2, 3));
    }

    #[test]
    fn token_grid_shape() {
        let b = WeightBundle::init(&ModelConfig::default(), 1, InitScheme::ZeroResidual).unwrap();
        let t = tokenize_frame(Array3::zeros((64, 64, 3)).view(), &b).unwrap();
        assert_eq!(t.len(), 64);
        assert_eq!((t.rows, t.cols, t.dim()), (8, 8, 64));
        assert!(tokenize_frame(Array3::zeros((60, 64, 3)).view(), &b).is_err());
    }

    #[test]
    fn single_patch_matches_dense_matmul() {
        let b = WeightBundle::init(&tiny_config(), 3, InitScheme::Dense).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(&mut rng, 8, 8, 3);
        let t = tokenize_frame(img.view(), &b).unwrap();
        let e = &b.fusion.image_embed;
        for o in 0..8 {
            let mut acc = e.bias[o];
            for y in 0..8 {
                for x in 0..8 {
                    for c in 0..3 {
                        acc += img[(y, x, c)] * e.weight[((y * 8 + x) * 3 + c, o)];
                    }
                }
            }
            assert!((t.values[(0, o)] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn event_tokenizer_contract() {
        let mut b = WeightBundle::init(&tiny_config(), 5, InitScheme::Dense).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tensor = EventTensor {
            data: random_image(&mut rng, 16, 8, 3),
            bin_start: 0,
            bin_end: 10,
            kind: crate::repr::TensorKind::TimeSurface,
        };
        let t = tokenize_events(&tensor, &b).unwrap();
        assert_eq!((t.rows, t.cols), (2, 1));
        let e = &b.fusion.event_embed;
        let flat: Vec<f64> = tensor.data.slice(s![8..16, .., ..]).iter().copied().collect();
        let expected = Array::from(flat).dot(&e.weight) + &e.bias;
        assert!(t
            .values
            .row(1)
            .iter()
            .zip(expected.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
        b.fusion.event_embed.bias.fill(0.0);
        let zero = EventTensor::zeros(16, 8, 3, crate::repr::TensorKind::TimeSurface);
        assert!(tokenize_events(&zero, &b).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn radius_zero_is_identity_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = random_tokens(&mut rng, 3, 2, 4);
        let i = random_tokens(&mut rng, 3, 2, 4);
        let cfg = ModelConfig {
            d: 4,
            radius: 0,
            ..tiny_config()
        };
        let b = WeightBundle::init(&cfg, 2, InitScheme::Dense).unwrap();
        let out = clwf_forward(&e, &i, 0, &b.fusion.clwf).unwrap();
        let v = b.fusion.clwf.value.forward(i.values.view());
        assert_eq!(out.cache.attention_matrix(), Array2::<f64>::eye(6));
        assert!((&out.tokens.values - &(&e.values + &v)).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn identical_keys_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = random_tokens(&mut rng, 3, 3, 4);
        let i = Tokens::new(Array2::from_elem((9, 4), 0.3), 3, 3).unwrap();
        let cfg = ModelConfig { d: 4, ..tiny_config() };
        let b = WeightBundle::init(&cfg, 3, InitScheme::ZeroResidual).unwrap();
        let out = clwf_forward(&e, &i, 1, &b.fusion.clwf).unwrap();
        let a = out.cache.attention_matrix();
        // Center token has 9 neighbors, corners 4.
        assert!((a[(4, 0)] - 1.0 / 9.0).abs() < 1e-15);
        assert!((a[(0, 0)] - 0.25).abs() < 1e-15);
        assert_eq!(a[(0, 8)], 0.0);
    }

    #[test]
    fn two_neighbor_scalar_oracle() {
        // 1x2 grid, d = 1, identity projections; query token 0 sees keys 0 and 1.
        let w = LocalAttention {
            query: Linear::identity(1),
            key: Linear::identity(1),
            value: Linear::identity(1),
            locality_bias: Array1::zeros(9),
        };
        let ln3 = 3f64.ln();
        let e = Tokens::new(ndarray::array![[1.0], [0.0]], 1, 2).unwrap();
        let i = Tokens::new(ndarray::array![[0.0], [ln3]], 1, 2).unwrap();
        let out = clwf_forward(&e, &i, 1, &w).unwrap();
        let a = out.cache.attention_matrix();
        assert!((a[(0, 0)] - 0.25).abs() < 1e-15 && (a[(0, 1)] - 0.75).abs() < 1e-15);
        let expected = 1.0 + 0.25 * 0.0 + 0.75 * ln3;
        assert!((out.tokens.values[(0, 0)] - expected).abs() < 1e-15);
    }

    #[test]
    fn locality_of_fusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = random_tokens(&mut rng, 4, 4, 8);
        let mut i = random_tokens(&mut rng, 4, 4, 8);
        let b = WeightBundle::init(&tiny_config(), 3, InitScheme::Dense).unwrap();
        let before = clwf_forward(&e, &i, 1, &b.fusion.clwf).unwrap().tokens;
        // Token (0, 0) is outside the neighborhood of (3, 3), (2, 3), (3, 2), (2, 2).
        i.values.row_mut(0).fill(9.0);
        let after = clwf_forward(&e, &i, 1, &b.fusion.clwf).unwrap().tokens;
        for j in [10, 11, 14, 15] {
            assert_eq!(before.values.row(j), after.values.row(j));
        }
        assert_ne!(before.values.row(0), after.values.row(0));
    }

    #[test]
    fn backward_requires_cache_and_zero_upstream_gives_zero() {
        let b = WeightBundle::init(&tiny_config(), 3, InitScheme::Dense).unwrap();
        assert_eq!(
            clwf_backward(None, &b.fusion.clwf, Array2::zeros((1, 8)).view()).unwrap_err(),
            FusionError::MissingForwardCache
        );
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = random_tokens(&mut rng, 2, 3, 8);
        let i = random_tokens(&mut rng, 2, 3, 8);
        let out = clwf_forward(&e, &i, 1, &b.fusion.clwf).unwrap();
        let g = clwf_backward(Some(&out.cache), &b.fusion.clwf, Array2::zeros((6, 8)).view()).unwrap();
        assert!(g.event_tokens.iter().chain(g.image_tokens.iter()).all(|&v| v == 0.0));
        assert!(g.query.weight.iter().chain(g.locality_bias.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn radius_zero_value_gradient_is_upstream() {
        let cfg = ModelConfig {
            radius: 0,
            ..tiny_config()
        };
        let b = WeightBundle::init(&cfg, 3, InitScheme::Dense).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = random_tokens(&mut rng, 2, 2, 8);
        let i = random_tokens(&mut rng, 2, 2, 8);
        let up = Array2::from_shape_fn((4, 8), |_| rng.random_range(-1.0..1.0));
        let out = clwf_forward(&e, &i, 0, &b.fusion.clwf).unwrap();
        let g = clwf_backward(Some(&out.cache), &b.fusion.clwf, up.view()).unwrap();
        // dL/dv = upstream, so dL/db_v = column sums of upstream.
        assert!((&g.value.bias - &up.sum_axis(Axis(0))).iter().all(|d| d.abs() < 1e-14));
        assert!(g.query.weight.iter().all(|&v| v == 0.0));
    }

    fn batch(events: Vec<Event>, lo: u64, hi: u64) -> EventBatch {
        EventBatch::new(lo, hi, events)
    }

    #[test]
    fn empty_update_is_bit_identical() {
        let b = WeightBundle::init(&tiny_config(), 3, InitScheme::Dense).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let frame = random_image(&mut rng, 16, 16, 3);
        let s0 = taf_init(frame.view(), &batch(vec![], 0, 1000), &b).unwrap();
        let s1 = taf_update(&s0, &batch(vec![], 1000, 2000), &b).unwrap();
        assert_eq!(s1.tokens, s0.tokens);
        assert_eq!(s1.state_time, 2000);
        assert_eq!(s1.frame_anchor_time, 1000);
        assert!(matches!(
            taf_update(&s1, &batch(vec![], 500, 1500), &b),
            Err(FusionError::TimeRegression { .. })
        ));
    }

    #[test]
    fn zero_output_projection_makes_update_identity() {
        let b = WeightBundle::init(&tiny_config(), 3, InitScheme::ZeroResidual).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let frame = random_image(&mut rng, 16, 16, 3);
        let s0 = taf_init(frame.view(), &batch(vec![], 0, 1000), &b).unwrap();
        let evs = vec![
            Event::new(1500, 3, 4, Polarity::Positive),
            Event::new(1600, 9, 12, Polarity::Negative),
        ];
        let s1 = taf_update(&s0, &batch(evs, 1000, 2000), &b).unwrap();
        assert_eq!(s1.tokens, s0.tokens);
    }

    #[test]
    fn identity_decoder_upsamples() {
        let cfg = tiny_config();
        let mut b = WeightBundle::init(&cfg, 1, InitScheme::Dense).unwrap();
        b.fusion.decoder.mix = (0..3).map(|_| Linear::identity(8)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let state = TransientState {
            tokens: random_tokens(&mut rng, 2, 3, 8),
            state_time: 0,
            frame_anchor_time: 0,
        };
        let skips = vec![
            Array3::zeros((2, 3, 8)),
            Array3::zeros((4, 6, 8)),
            Array3::zeros((8, 12, 8)),
        ];
        let p = decode_pyramid(&state, &skips, &b.fusion.decoder, 8).unwrap();
        for (l, level) in p.levels.iter().enumerate() {
            let f = 1 << l;
            assert_eq!(level.stride, 8 >> l);
            for ((r, c, ch), v) in level.data.indexed_iter() {
                assert_eq!(*v, state.tokens.values[((r / f) * 3 + c / f, ch)]);
            }
        }
        let zero_state = TransientState {
            tokens: Tokens::new(Array2::zeros((6, 8)), 2, 3).unwrap(),
            ..state
        };
        let z = decode_pyramid(&zero_state, &skips, &b.fusion.decoder, 8).unwrap();
        assert!(z.levels.iter().all(|l| l.data.iter().all(|&v| v == 0.0)));
    }
}
