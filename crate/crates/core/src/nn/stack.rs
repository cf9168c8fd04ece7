use ndarray::Array2;
use rand::Rng;

use super::{join, leaky_relu, leaky_relu_backward, Conv1d, ConvCache, Param, Parameterized, SeqBatch};

/// Stride-1 "same" convolutions with LeakyReLU between layers and a linear
/// last layer.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub layers: Vec<Conv1d>,
}

pub struct ConvStackCache {
    convs: Vec<ConvCache>,
    /// Pre-activations of every layer but the last.
    pre: Vec<Array2<f32>>,
}

impl ConvStack {
    /// `widths` lists every layer's output width.
    pub fn new(c_in: usize, widths: &[usize], kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(!widths.is_empty());
        let mut layers = Vec::with_capacity(widths.len());
        let mut c = c_in;
        for &w in widths {
            layers.push(Conv1d::new(c, w, kernel, rng));
            c = w;
        }
        ConvStack { layers }
    }

    pub fn c_out(&self) -> usize {
        self.layers.last().unwrap().c_out
    }

    /// Frames on each side of an output frame that influence it.
    pub fn receptive_radius(&self) -> usize {
        self.layers.iter().map(|l| l.kernel / 2).sum()
    }

    pub fn infer(&self, x: &SeqBatch) -> SeqBatch {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.infer(&h);
            if i < last {
                h.data = leaky_relu(&h.data);
            }
        }
        h
    }

    pub fn forward(&self, x: &SeqBatch) -> (SeqBatch, ConvStackCache) {
        let mut convs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, cache) = layer.forward(&h);
            convs.push(cache);
            h = y;
            if i < last {
                let act = leaky_relu(&h.data);
                pre.push(std::mem::replace(&mut h.data, act));
            }
        }
        (h, ConvStackCache { convs, pre })
    }

    pub fn backward(&mut self, cache: ConvStackCache, dy: &Array2<f32>) -> Array2<f32> {
        let mut d = dy.clone();
        let mut pre = cache.pre;
        for (layer, conv) in self.layers.iter_mut().zip(cache.convs).rev() {
            d = layer.backward(conv, &d);
            if let Some(p) = pre.pop() {
                d = leaky_relu_backward(&p, &d);
            }
        }
        d
    }
}

impl Parameterized for ConvStack {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.layers.visit(&join(prefix, "conv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.layers.visit_mut(&join(prefix, "conv"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn preserves_length_and_matches_inference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stack = ConvStack::new(4, &[6, 6, 3], 5, &mut rng);
        let x = SeqBatch::new(Array2::from_shape_fn((18, 4), |_| rng.random_range(-1.0..1.0)), 2, 9);
        let (y, _) = stack.forward(&x);
        assert_eq!((y.batch, y.len, y.channels()), (2, 9, 3));
        assert_eq!(y, stack.infer(&x));
        assert_eq!(stack.receptive_radius(), 6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut stack = ConvStack::new(3, &[5, 2], 3, &mut rng);
        let mut x = Array2::from_shape_fn((14, 3), |_| rng.random_range(-1.0..1.0));
        let w = gradcheck::probe_weights(14, 2);
        let (_, cache) = stack.forward(&SeqBatch::new(x.clone(), 2, 7));
        let dx = stack.backward(cache, &w);
        let probe = stack.clone();
        let err = gradcheck::check(&mut x, &dx, &gradcheck::coords(14, 3, 10), 1e-2, |x| {
            gradcheck::weighted_sum(&probe.infer(&SeqBatch::new(x.clone(), 2, 7)).data, &w)
        });
        assert!(err < 1e-2, "{err}");
    }
}
