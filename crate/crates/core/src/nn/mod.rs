//! Minimal layer library with hand-written backward passes.
//!
//! Every activation tensor is a [`SeqBatch`]: a batch of equal-length
//! sequences flattened into one row-major matrix whose row `b * len + t`
//! holds the channel vector of item `b` at time `t`. Layers expose
//! `forward` (returns a cache), `backward` (consumes the cache, accumulates
//! parameter gradients, returns the input gradient) and `infer` (no cache).

mod adam;
mod batchnorm;
mod conv;
mod linear;
mod lstm;
mod stack;

pub use adam::{Adam, AdamState};
pub use batchnorm::{BatchNorm1d, BatchNormCache};
pub use conv::{Conv1d, ConvCache};
pub use linear::{Linear, LinearCache};
pub use lstm::{Lstm, LstmCache};
pub use stack::{ConvStack, ConvStackCache};

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    pub data: Array2<f32>,
    pub batch: usize,
    pub len: usize,
}

impl SeqBatch {
    pub fn new(data: Array2<f32>, batch: usize, len: usize) -> Self {
        assert_eq!(
            data.nrows(),
            batch * len,
            "row count must equal batch * len"
        );
        SeqBatch { data, batch, len }
    }

    /// A batch of one `[T × C]` sequence.
    pub fn single(seq: Array2<f32>) -> Self {
        let len = seq.nrows();
        SeqBatch::new(seq, 1, len)
    }

    pub fn from_items(items: &[ArrayView2<'_, f32>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("empty batch".into()))?;
        let (len, ch) = first.dim();
        if items.iter().any(|it| it.dim() != (len, ch)) {
            return Err(Error::Shape(
                "batch items must share length and width".into(),
            ));
        }
        let views: Vec<_> = items.to_vec();
        let data = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(SeqBatch::new(data, items.len(), len))
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn item(&self, b: usize) -> ArrayView2<'_, f32> {
        self.data.slice(s![b * self.len..(b + 1) * self.len, ..])
    }

    pub fn with_data(&self, data: Array2<f32>) -> Self {
        SeqBatch::new(data, self.batch, self.len)
    }
}

/// A learnable (or buffered, when `trainable` is false) matrix with its
/// accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Array2<f32>,
    pub grad: Array2<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn new(value: Array2<f32>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Param {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(value: Array2<f32>) -> Self {
        Param {
            trainable: false,
            ..Param::new(value)
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(rows: usize, cols: usize, bound: f32, rng: &mut impl Rng) -> Self {
        let value = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound));
        Param::new(value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Walks named parameters. Names are dotted paths such as
/// `content.conv.0.weight`.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.value.len()
            }
        });
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Parameterized> Parameterized for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

pub const LEAKY_SLOPE: f32 = 0.01;

pub fn leaky_relu(x: &Array2<f32>) -> Array2<f32> {
    x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

/// Gradient through `leaky_relu`, given the pre-activation.
pub fn leaky_relu_backward(pre: &Array2<f32>, dy: &Array2<f32>) -> Array2<f32> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(pre).for_each(|d, &p| {
        if p <= 0.0 {
            *d *= LEAKY_SLOPE
        }
    });
    dx
}

pub fn relu(x: &Array2<f32>) -> Array2<f32> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(pre: &Array2<f32>, dy: &Array2<f32>) -> Array2<f32> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(pre).for_each(|d, &p| {
        if p <= 0.0 {
            *d = 0.0
        }
    });
    dx
}

pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Row-wise mean over time for every item: `[B·T × C] -> [B × C]`.
pub fn time_mean(x: &SeqBatch) -> Array2<f32> {
    let mut out = Array2::zeros((x.batch, x.channels()));
    for b in 0..x.batch {
        let m = x.item(b).mean_axis(Axis(0)).expect("len > 0");
        out.row_mut(b).assign(&m);
    }
    out
}

/// Gradient of [`time_mean`]: spreads each item's gradient evenly over time.
pub fn time_mean_backward(dmean: &Array2<f32>, len: usize) -> Array2<f32> {
    let (batch, ch) = dmean.dim();
    let mut dx = Array2::zeros((batch * len, ch));
    let scale = 1.0 / len as f32;
    for b in 0..batch {
        let row = dmean.row(b).mapv(|v| v * scale);
        for t in 0..len {
            dx.row_mut(b * len + t).assign(&row);
        }
    }
    dx
}

/// Repeats each item's vector `len` times along time.
pub fn replicate(vectors: &Array2<f32>, len: usize) -> SeqBatch {
    let (batch, ch) = vectors.dim();
    let mut data = Array2::zeros((batch * len, ch));
    for b in 0..batch {
        for t in 0..len {
            data.row_mut(b * len + t).assign(&vectors.row(b));
        }
    }
    SeqBatch::new(data, batch, len)
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central finite differences in f64 over f32 layers.

    use ndarray::Array2;

    /// Compares analytic and numeric derivatives of `loss` w.r.t. `x` on a
    /// handful of coordinates; returns the worst relative error.
    pub fn check(
        x: &mut Array2<f32>,
        analytic: &Array2<f32>,
        coords: &[(usize, usize)],
        h: f32,
        mut loss: impl FnMut(&Array2<f32>) -> f64,
    ) -> f64 {
        let mut worst: f64 = 0.0;
        for &(i, j) in coords {
            let orig = x[[i, j]];
            x[[i, j]] = orig + h;
            let up = loss(x);
            x[[i, j]] = orig - h;
            let down = loss(x);
            x[[i, j]] = orig;
            let step = ((orig + h) as f64) - ((orig - h) as f64);
            let numeric = (up - down) / step;
            let a = analytic[[i, j]] as f64;
            let rel = (numeric - a).abs() / (numeric.abs().max(a.abs()).max(1e-3));
            worst = worst.max(rel);
        }
        worst
    }

    pub fn coords(rows: usize, cols: usize, n: usize) -> Vec<(usize, usize)> {
        (0..n)
            .map(|k| ((k * 7 + 3) % rows, (k * 13 + 1) % cols))
            .collect()
    }

    /// Weighted sum with fixed pseudo-random weights; a generic scalar head.
    pub fn probe_weights(rows: usize, cols: usize) -> Array2<f32> {
        Array2::from_shape_fn((rows, cols), |(i, j)| {
            (((i * 31 + j * 17) % 23) as f32 - 11.0) / 11.0
        })
    }

    pub fn weighted_sum(y: &Array2<f32>, w: &Array2<f32>) -> f64 {
        y.iter()
            .zip(w.iter())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }
}
