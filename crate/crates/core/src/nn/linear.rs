use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Axis};
use rand::Rng;

use super::{join, Param, Parameterized};

/// Row-wise affine map `y = x W + b`, `W: [in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

pub struct LinearCache {
    input: Array2<f32>,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f32).sqrt();
        Linear {
            weight: Param::uniform(d_in, d_out, bound, rng),
            bias: Param::uniform(1, d_out, bound, rng),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn infer(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut y = Array2::zeros((x.nrows(), self.d_out()));
        y += &self.bias.value.row(0);
        general_mat_mul(1.0, x, &self.weight.value, 1.0, &mut y);
        y
    }

    pub fn forward(&self, x: &Array2<f32>) -> (Array2<f32>, LinearCache) {
        (self.infer(x), LinearCache { input: x.clone() })
    }

    pub fn backward(&mut self, cache: LinearCache, dy: &Array2<f32>) -> Array2<f32> {
        general_mat_mul(1.0, &cache.input.t(), dy, 1.0, &mut self.weight.grad);
        self.bias.grad += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.value.t())
    }
}

impl Parameterized for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
