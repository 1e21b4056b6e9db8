//! Small dense building blocks shared by the fusion network and the refiner.
//! Row-vector convention throughout: `y = x W + b` with `W: in×out`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    /// `uniform(-1/√fan_in, 1/√fan_in)` for weights and bias.
    pub fn uniform<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let mut l = Self::zeros(fan_in, fan_out);
        l.fill_uniform(rng);
        l
    }

    pub fn fill_uniform<R: Rng>(&mut self, rng: &mut R) {
        let bound = 1.0 / (self.fan_in().max(1) as f64).sqrt();
        self.weight.mapv_inplace(|_| rng.random_range(-bound..=bound));
        self.bias.mapv_inplace(|_| rng.random_range(-bound..=bound));
    }

    pub fn zero(&mut self) {
        self.weight.fill(0.0);
        self.bias.fill(0.0);
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn forward_vec(&self, x: ArrayView1<f64>) -> Array1<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn is_zero(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|&v| v == 0.0)
    }
}

/// Gradient of a scalar loss w.r.t. one [`Linear`].
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearGrad {
    pub fn zeros_like(l: &Linear) -> Self {
        Self {
            weight: Array2::zeros(l.weight.raw_dim()),
            bias: Array1::zeros(l.bias.raw_dim()),
        }
    }

    /// Accumulates the gradient of `y = x W + b` given `dy`; returns `dx`.
    pub fn accumulate(&mut self, layer: &Linear, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        self.weight += &x.t().dot(&dy);
        self.bias += &dy.sum_axis(Axis(0));
        dy.dot(&layer.weight.t())
    }

    pub fn add(&mut self, other: &LinearGrad) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }
}

/// Parameter-free layer norm over each row.
pub fn layer_norm(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("contiguous rows"));
    }
    m
}

pub fn relu(x: Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Transformer-style sinusoid: `sin(pos·ω_i)` in even slots, `cos` in odd,
/// `ω_i = 10000^(-2⌊i/2⌋/dim)`.
pub fn sinusoid(pos: f64, dim: usize) -> Array1<f64> {
    Array1::from_shape_fn(dim, |i| {
        let omega = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
        if i % 2 == 0 {
            (pos * omega).sin()
        } else {
            (pos * omega).cos()
        }
    })
}

/// 2-D encoding: the first half of the channels encode `row`, the rest `col`.
pub fn spatial_encoding(row: usize, col: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    out.slice_mut(ndarray::s![..half]).assign(&sinusoid(row as f64, half));
    out.slice_mut(ndarray::s![half..])
        .assign(&sinusoid(col as f64, dim - half));
    out
}

/// `T×dim` temporal encodings for window positions `0..len`.
pub fn temporal_encodings(len: usize, dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((len, dim));
    for (t, mut row) in out.rows_mut().into_iter().enumerate() {
        row.assign(&sinusoid(t as f64, dim));
    }
    out
}
