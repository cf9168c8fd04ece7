use ndarray::{Array1, Array2, Axis};

use super::{join, Param, Parameterized};

const EPS: f32 = 1e-5;
const MOMENTUM: f32 = 0.1;

/// Batch normalization over all rows of a `[N × C]` activation.
///
/// Training uses batch statistics and folds them into running estimates;
/// inference uses the running estimates only.
#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
}

pub struct BatchNormCache {
    normalized: Array2<f32>,
    inv_std: Array1<f32>,
}

impl BatchNorm1d {
    pub fn new(channels: usize) -> Self {
        BatchNorm1d {
            gamma: Param::new(Array2::ones((1, channels))),
            beta: Param::new(Array2::zeros((1, channels))),
            running_mean: Param::buffer(Array2::zeros((1, channels))),
            running_var: Param::buffer(Array2::ones((1, channels))),
        }
    }

    pub fn forward(&mut self, x: &Array2<f32>) -> (Array2<f32>, BatchNormCache) {
        let n = x.nrows() as f32;
        let mean = x.mean_axis(Axis(0)).expect("rows > 0");
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + EPS).sqrt());
        let normalized = &centered * &inv_std;
        let y = &normalized * &self.gamma.value.row(0) + &self.beta.value.row(0);

        let unbiased = if n > 1.0 { &var * (n / (n - 1.0)) } else { var.clone() };
        let mut rm = self.running_mean.value.row_mut(0);
        rm.zip_mut_with(&mean, |r, &m| *r = (1.0 - MOMENTUM) * *r + MOMENTUM * m);
        let mut rv = self.running_var.value.row_mut(0);
        rv.zip_mut_with(&unbiased, |r, &v| *r = (1.0 - MOMENTUM) * *r + MOMENTUM * v);

        (y, BatchNormCache { normalized, inv_std })
    }

    pub fn infer(&self, x: &Array2<f32>) -> Array2<f32> {
        let inv_std = self.running_var.value.row(0).mapv(|v| 1.0 / (v + EPS).sqrt());
        let scale = &inv_std * &self.gamma.value.row(0);
        let shift = &self.beta.value.row(0) - &(&self.running_mean.value.row(0) * &scale);
        x * &scale + &shift
    }

    pub fn backward(&mut self, cache: BatchNormCache, dy: &Array2<f32>) -> Array2<f32> {
        let n = dy.nrows() as f32;
        let xhat = &cache.normalized;
        self.gamma.grad += &(dy * xhat).sum_axis(Axis(0));
        self.beta.grad += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma.value.row(0);
        let sum_d = dxhat.sum_axis(Axis(0));
        let sum_dx = (&dxhat * xhat).sum_axis(Axis(0));
        let scaled = &dxhat * n - &sum_d - &(xhat * &sum_dx);
        scaled * &(&cache.inv_std / n)
    }
}

impl Parameterized for BatchNorm1d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
        f(join(prefix, "running_mean"), &self.running_mean);
        f(join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
        f(join(prefix, "running_mean"), &mut self.running_mean);
        f(join(prefix, "running_var"), &mut self.running_var);
    }
}
