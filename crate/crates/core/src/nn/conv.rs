use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Axis};
use rand::Rng;

use super::{join, Param, Parameterized, SeqBatch};

/// Stride-1 1-D convolution over time with symmetric "same" padding, so the
/// output length always equals the input length.
///
/// The weight is stored in im2col layout `[kernel·c_in × c_out]`, tap-major.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: Param,
    pub bias: Param,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
}

pub struct ConvCache {
    cols: Array2<f32>,
    batch: usize,
    len: usize,
}

impl Conv1d {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        let bound = 1.0 / ((kernel * c_in) as f32).sqrt();
        Conv1d {
            weight: Param::uniform(kernel * c_in, c_out, bound, rng),
            bias: Param::uniform(1, c_out, bound, rng),
            kernel,
            c_in,
            c_out,
        }
    }

    fn im2col(&self, x: &SeqBatch) -> Array2<f32> {
        assert_eq!(x.channels(), self.c_in, "conv input width");
        let (k, c, len) = (self.kernel, self.c_in, x.len);
        let pad = k / 2;
        let src = x.data.as_standard_layout();
        let src = src.as_slice().expect("standard layout");
        let mut cols = Array2::<f32>::zeros((x.batch * len, k * c));
        let dst = cols.as_slice_mut().expect("fresh array");
        for b in 0..x.batch {
            for t in 0..len {
                let row = (b * len + t) * k * c;
                for j in 0..k {
                    let s = t as isize + j as isize - pad as isize;
                    if s < 0 || s >= len as isize {
                        continue;
                    }
                    let from = (b * len + s as usize) * c;
                    dst[row + j * c..row + (j + 1) * c].copy_from_slice(&src[from..from + c]);
                }
            }
        }
        cols
    }

    fn project(&self, cols: &Array2<f32>) -> Array2<f32> {
        let mut y = Array2::zeros((cols.nrows(), self.c_out));
        y += &self.bias.value.row(0);
        general_mat_mul(1.0, cols, &self.weight.value, 1.0, &mut y);
        y
    }

    pub fn forward(&self, x: &SeqBatch) -> (SeqBatch, ConvCache) {
        let cols = self.im2col(x);
        let y = self.project(&cols);
        let cache = ConvCache {
            cols,
            batch: x.batch,
            len: x.len,
        };
        (x.with_data(y), cache)
    }

    pub fn infer(&self, x: &SeqBatch) -> SeqBatch {
        x.with_data(self.project(&self.im2col(x)))
    }

    pub fn backward(&mut self, cache: ConvCache, dy: &Array2<f32>) -> Array2<f32> {
        general_mat_mul(1.0, &cache.cols.t(), dy, 1.0, &mut self.weight.grad);
        self.bias.grad += &dy.sum_axis(Axis(0));
        let dcols = dy.dot(&self.weight.value.t());
        let (k, c, len) = (self.kernel, self.c_in, cache.len);
        let pad = k / 2;
        let mut dx = Array2::<f32>::zeros((cache.batch * len, c));
        let dst = dx.as_slice_mut().expect("fresh array");
        let src = dcols.as_slice().expect("fresh array");
        for b in 0..cache.batch {
            for t in 0..len {
                let row = (b * len + t) * k * c;
                for j in 0..k {
                    let s = t as isize + j as isize - pad as isize;
                    if s < 0 || s >= len as isize {
                        continue;
                    }
                    let to = (b * len + s as usize) * c;
                    for (d, v) in dst[to..to + c]
                        .iter_mut()
                        .zip(&src[row + j * c..row + (j + 1) * c])
                    {
                        *d += v;
                    }
                }
            }
        }
        dx
    }
}

impl Parameterized for Conv1d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
