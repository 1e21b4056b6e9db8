//! Central-difference verification of the analytic attention gradients.
//!
//! Each check draws a random instance from a seed, backpropagates a random
//! upstream gradient and compares every input and parameter derivative with
//! `(L(θ+h) − L(θ−h)) / 2h` for the scalar loss `L = Σ upstream ⊙ output`.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fusion::{
    clwf_backward, clwf_forward, temporal_attention_backward, temporal_attention_forward, Tokens, TransientState,
};
use crate::nn::{Linear, LinearGrad};
use crate::weights::{LocalAttention, TemporalAttentionWeights};

pub const FD_STEP: f64 = 1e-4;

/// Denominator floor for the relative error. Structurally zero derivatives
/// (a key bias under softmax, say) come back from the difference quotient as
/// rounding noise of order `ε·|L|/h ≈ 1e-11`; the floor sits well above that
/// and well below any derivative of interest.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Outcome of one gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckReport {
    pub max_relative_error: f64,
    pub entries: usize,
}

impl CheckReport {
    fn merge(&mut self, errors: impl IntoIterator<Item = f64>) {
        for e in errors {
            self.max_relative_error = self.max_relative_error.max(e);
            self.entries += 1;
        }
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Projections drawn exactly as the model initializes them.
fn random_linear(rng: &mut ChaCha8Rng, d: usize) -> Linear {
    Linear::uniform(d, d, rng)
}

/// Compares `analytic` with central differences of `loss` taken over every
/// element of `values` (perturbed in place and restored).
fn fd_slice(values: &mut [f64], analytic: &[f64], loss: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let orig = values[i];
            values[i] = orig + FD_STEP;
            let plus = loss(values);
            values[i] = orig - FD_STEP;
            let minus = loss(values);
            values[i] = orig;
            relative_error(analytic[i], (plus - minus) / (2.0 * FD_STEP))
        })
        .collect()
}

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[derive(Clone)]
struct ClwfInstance {
    events: Array2<f64>,
    image: Array2<f64>,
    rows: usize,
    cols: usize,
    radius: usize,
    w: LocalAttention,
    upstream: Array2<f64>,
}

impl ClwfInstance {
    fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rng.random_range(1..=4);
        let cols = rng.random_range(1..=4);
        let d = rng.random_range(2..=6);
        let radius: usize = rng.random_range(0..=2);
        let n = rows * cols;
        let w = LocalAttention {
            query: random_linear(&mut rng, d),
            key: random_linear(&mut rng, d),
            value: random_linear(&mut rng, d),
            locality_bias: Array1::from_shape_fn((2 * radius + 1).pow(2), |_| rng.random_range(-1.0..1.0)),
        };
        Self {
            events: uniform_matrix(&mut rng, n, d),
            image: uniform_matrix(&mut rng, n, d),
            rows,
            cols,
            radius,
            w,
            upstream: uniform_matrix(&mut rng, n, d),
        }
    }

    fn loss(&self) -> f64 {
        let e = Tokens::new(self.events.clone(), self.rows, self.cols).expect("grid");
        let i = Tokens::new(self.image.clone(), self.rows, self.cols).expect("grid");
        let out = clwf_forward(&e, &i, self.radius, &self.w).expect("valid instance");
        dot(&out.tokens.values, &self.upstream)
    }
}

fn check_linear(layer: &Linear, grad: &LinearGrad, loss: &mut dyn FnMut(&Linear) -> f64, report: &mut CheckReport) {
    let mut layer = layer.clone();
    let gw = grad.weight.as_standard_layout().to_owned();
    let gb = grad.bias.to_vec();
    let shape = layer.weight.raw_dim();
    let mut wflat = layer.weight.iter().copied().collect::<Vec<_>>();
    report.merge(fd_slice(
        &mut wflat,
        gw.as_slice().expect("standard layout"),
        &mut |v| {
            let mut l = layer.clone();
            l.weight = Array2::from_shape_vec(shape, v.to_vec()).expect("shape");
            loss(&l)
        },
    ));
    let mut bflat = layer.bias.to_vec();
    report.merge(fd_slice(&mut bflat, &gb, &mut |v| {
        layer.bias = Array1::from(v.to_vec());
        loss(&layer)
    }));
}

/// Gradient check of the locality-weighted cross-attention on the instance
/// drawn from `seed`, covering both token sets, all projections and the bias
/// table.
pub fn check_clwf(seed: u64) -> CheckReport {
    let base = ClwfInstance::random(seed);
    let e = Tokens::new(base.events.clone(), base.rows, base.cols).expect("grid");
    let i = Tokens::new(base.image.clone(), base.rows, base.cols).expect("grid");
    let fwd = clwf_forward(&e, &i, base.radius, &base.w).expect("valid instance");
    let g = clwf_backward(Some(&fwd.cache), &base.w, base.upstream.view()).expect("cached");
    let mut report = CheckReport {
        max_relative_error: 0.0,
        entries: 0,
    };

    let mut flat = base.events.iter().copied().collect::<Vec<_>>();
    report.merge(fd_slice(
        &mut flat,
        g.event_tokens.as_slice().expect("standard"),
        &mut |v| {
            let mut x = base.clone();
            x.events = Array2::from_shape_vec(base.events.raw_dim(), v.to_vec()).expect("shape");
            x.loss()
        },
    ));
    let mut flat = base.image.iter().copied().collect::<Vec<_>>();
    report.merge(fd_slice(
        &mut flat,
        g.image_tokens.as_slice().expect("standard"),
        &mut |v| {
            let mut x = base.clone();
            x.image = Array2::from_shape_vec(base.image.raw_dim(), v.to_vec()).expect("shape");
            x.loss()
        },
    ));
    let mut flat = base.w.locality_bias.to_vec();
    report.merge(fd_slice(&mut flat, &g.locality_bias.to_vec(), &mut |v| {
        let mut x = base.clone();
        x.w.locality_bias = Array1::from(v.to_vec());
        x.loss()
    }));

    type Pick = fn(&mut LocalAttention) -> &mut Linear;
    let picks: [(Pick, &LinearGrad); 3] = [
        (|w| &mut w.query, &g.query),
        (|w| &mut w.key, &g.key),
        (|w| &mut w.value, &g.value),
    ];
    for (pick, grad) in picks {
        let mut owner = base.w.clone();
        check_linear(
            pick(&mut owner),
            grad,
            &mut |l| {
                let mut x = base.clone();
                *pick(&mut x.w) = l.clone();
                x.loss()
            },
            &mut report,
        );
    }
    report
}

#[derive(Clone)]
struct TemporalInstance {
    states: Vec<Array2<f64>>,
    rows: usize,
    cols: usize,
    w: TemporalAttentionWeights,
    upstream: Vec<Array2<f64>>,
}

impl TemporalInstance {
    fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rng.random_range(1..=3);
        let cols = rng.random_range(1..=3);
        let d = rng.random_range(2..=6);
        let len = rng.random_range(1..=5);
        let n = rows * cols;
        let w = TemporalAttentionWeights {
            query: random_linear(&mut rng, d),
            key: random_linear(&mut rng, d),
            value: random_linear(&mut rng, d),
            output: random_linear(&mut rng, d),
        };
        Self {
            states: (0..len).map(|_| uniform_matrix(&mut rng, n, d)).collect(),
            rows,
            cols,
            w,
            upstream: (0..len).map(|_| uniform_matrix(&mut rng, n, d)).collect(),
        }
    }

    fn transient(&self) -> Vec<TransientState> {
        self.states
            .iter()
            .enumerate()
            .map(|(t, v)| TransientState {
                tokens: Tokens::new(v.clone(), self.rows, self.cols).expect("grid"),
                state_time: t as u64,
                frame_anchor_time: 0,
            })
            .collect()
    }

    fn loss(&self) -> f64 {
        let out = temporal_attention_forward(&self.transient(), &self.w).expect("valid instance");
        out.outputs
            .iter()
            .zip(&self.upstream)
            .map(|(s, u)| dot(&s.tokens.values, u))
            .sum()
    }
}

/// Gradient check of the temporal self-attention on the instance drawn from
/// `seed`, covering every input state and all four projections.
pub fn check_temporal(seed: u64) -> CheckReport {
    let base = TemporalInstance::random(seed);
    let fwd = temporal_attention_forward(&base.transient(), &base.w).expect("valid instance");
    let g = temporal_attention_backward(Some(&fwd), &base.w, &base.upstream).expect("cached");
    let mut report = CheckReport {
        max_relative_error: 0.0,
        entries: 0,
    };
    for t in 0..base.states.len() {
        let mut flat = base.states[t].iter().copied().collect::<Vec<_>>();
        report.merge(fd_slice(
            &mut flat,
            g.states[t].as_slice().expect("standard"),
            &mut |v| {
                let mut x = base.clone();
                x.states[t] = Array2::from_shape_vec(base.states[t].raw_dim(), v.to_vec()).expect("shape");
                x.loss()
            },
        ));
    }
    type Pick = fn(&mut TemporalAttentionWeights) -> &mut Linear;
    let picks: [(Pick, &LinearGrad); 4] = [
        (|w| &mut w.query, &g.params.query),
        (|w| &mut w.key, &g.params.key),
        (|w| &mut w.value, &g.params.value),
        (|w| &mut w.output, &g.params.output),
    ];
    for (pick, grad) in picks {
        let mut owner = base.w.clone();
        check_linear(
            pick(&mut owner),
            grad,
            &mut |l| {
                let mut x = base.clone();
                *pick(&mut x.w) = l.clone();
                x.loss()
            },
            &mut report,
        );
    }
    report
}
