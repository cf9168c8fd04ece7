use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Axis};
use rand::Rng;

use super::{join, sigmoid, Param, Parameterized, SeqBatch};

/// Single-layer unidirectional LSTM, gate order `i, f, g, o`.
#[derive(Clone, Debug)]
pub struct Lstm {
    /// `[in × 4H]`
    pub w_ih: Param,
    /// `[H × 4H]`
    pub w_hh: Param,
    /// `[1 × 4H]`
    pub bias: Param,
    pub hidden: usize,
}

/// Per-step activations in time-major order (row `t * batch + b`).
pub struct LstmCache {
    input: Array2<f32>,
    gates: Array2<f32>,
    cells: Array2<f32>,
    hiddens: Array2<f32>,
    batch: usize,
    len: usize,
}

impl Lstm {
    pub fn new(d_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f32).sqrt();
        let mut bias = Param::uniform(1, 4 * hidden, bound, rng);
        // forget gate starts open
        bias.value.slice_mut(s![.., hidden..2 * hidden]).fill(1.0);
        Lstm {
            w_ih: Param::uniform(d_in, 4 * hidden, bound, rng),
            w_hh: Param::uniform(hidden, 4 * hidden, bound, rng),
            bias,
            hidden,
        }
    }

    fn run(&self, x: &SeqBatch) -> LstmCache {
        let (batch, len, hid) = (x.batch, x.len, self.hidden);
        let mut xw = Array2::zeros((batch * len, 4 * hid));
        xw += &self.bias.value.row(0);
        general_mat_mul(1.0, &x.data, &self.w_ih.value, 1.0, &mut xw);

        let mut gates = Array2::<f32>::zeros((len * batch, 4 * hid));
        let mut cells = Array2::<f32>::zeros((len * batch, hid));
        let mut hiddens = Array2::<f32>::zeros((len * batch, hid));
        let mut h = Array2::<f32>::zeros((batch, hid));
        let mut c = Array2::<f32>::zeros((batch, hid));
        let mut pre = Array2::<f32>::zeros((batch, 4 * hid));
        for t in 0..len {
            pre.assign(&xw.slice(s![t..;len, ..]));
            general_mat_mul(1.0, &h, &self.w_hh.value, 1.0, &mut pre);
            for b in 0..batch {
                let p = pre.row(b);
                let p = p.as_slice().expect("contiguous");
                let row = t * batch + b;
                let mut g_row = gates.row_mut(row);
                let g = g_row.as_slice_mut().expect("contiguous");
                let mut c_row = c.row_mut(b);
                let cb = c_row.as_slice_mut().expect("contiguous");
                let mut h_row = h.row_mut(b);
                let hb = h_row.as_slice_mut().expect("contiguous");
                for k in 0..hid {
                    let i = sigmoid(p[k]);
                    let f = sigmoid(p[hid + k]);
                    let gg = p[2 * hid + k].tanh();
                    let o = sigmoid(p[3 * hid + k]);
                    g[k] = i;
                    g[hid + k] = f;
                    g[2 * hid + k] = gg;
                    g[3 * hid + k] = o;
                    cb[k] = f * cb[k] + i * gg;
                    hb[k] = o * cb[k].tanh();
                }
                cells.row_mut(row).assign(&c.row(b));
                hiddens.row_mut(row).assign(&h.row(b));
            }
        }
        LstmCache {
            input: x.data.clone(),
            gates,
            cells,
            hiddens,
            batch,
            len,
        }
    }

    fn to_batch_major(tm: &Array2<f32>, batch: usize, len: usize) -> Array2<f32> {
        let mut out = Array2::zeros(tm.raw_dim());
        for t in 0..len {
            for b in 0..batch {
                out.row_mut(b * len + t).assign(&tm.row(t * batch + b));
            }
        }
        out
    }

    pub fn forward(&self, x: &SeqBatch) -> (SeqBatch, LstmCache) {
        let cache = self.run(x);
        let y = Self::to_batch_major(&cache.hiddens, x.batch, x.len);
        (SeqBatch::new(y, x.batch, x.len), cache)
    }

    pub fn infer(&self, x: &SeqBatch) -> SeqBatch {
        self.forward(x).0
    }

    pub fn backward(&mut self, cache: LstmCache, dy: &Array2<f32>) -> Array2<f32> {
        let (batch, len, hid) = (cache.batch, cache.len, self.hidden);
        let mut dgates = Array2::<f32>::zeros((len * batch, 4 * hid));
        let mut dh_next = Array2::<f32>::zeros((batch, hid));
        let mut dc_next = Array2::<f32>::zeros((batch, hid));
        for t in (0..len).rev() {
            for b in 0..batch {
                let row = t * batch + b;
                let g = cache.gates.row(row);
                let g = g.as_slice().expect("contiguous");
                let c = cache.cells.row(row);
                let c = c.as_slice().expect("contiguous");
                let c_prev = (t > 0).then(|| cache.cells.row(row - batch));
                let dy_row = dy.row(b * len + t);
                let mut dg_row = dgates.row_mut(row);
                let dg = dg_row.as_slice_mut().expect("contiguous");
                for k in 0..hid {
                    let (i, f, gg, o) = (g[k], g[hid + k], g[2 * hid + k], g[3 * hid + k]);
                    let tc = c[k].tanh();
                    let dh = dy_row[k] + dh_next[[b, k]];
                    let d_o = dh * tc;
                    let dc = dh * o * (1.0 - tc * tc) + dc_next[[b, k]];
                    let cp = c_prev.as_ref().map_or(0.0, |r| r[k]);
                    dg[k] = dc * gg * i * (1.0 - i);
                    dg[hid + k] = dc * cp * f * (1.0 - f);
                    dg[2 * hid + k] = dc * i * (1.0 - gg * gg);
                    dg[3 * hid + k] = d_o * o * (1.0 - o);
                    dc_next[[b, k]] = dc * f;
                }
            }
            let dg_t = dgates.slice(s![t * batch..(t + 1) * batch, ..]);
            general_mat_mul(1.0, &dg_t, &self.w_hh.value.t(), 0.0, &mut dh_next);
        }

        // h_{t-1} aligned with dgates rows; zero at t = 0.
        let mut h_prev = Array2::<f32>::zeros((len * batch, hid));
        if len > 1 {
            h_prev
                .slice_mut(s![batch.., ..])
                .assign(&cache.hiddens.slice(s![..(len - 1) * batch, ..]));
        }
        general_mat_mul(1.0, &h_prev.t(), &dgates, 1.0, &mut self.w_hh.grad);

        let dg_bm = Self::to_batch_major(&dgates, batch, len);
        general_mat_mul(1.0, &cache.input.t(), &dg_bm, 1.0, &mut self.w_ih.grad);
        self.bias.grad += &dg_bm.sum_axis(Axis(0));
        dg_bm.dot(&self.w_ih.value.t())
    }
}

impl Parameterized for Lstm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "w_ih"), &self.w_ih);
        f(join(prefix, "w_hh"), &self.w_hh);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "w_ih"), &mut self.w_ih);
        f(join(prefix, "w_hh"), &mut self.w_hh);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batch_items_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lstm = Lstm::new(3, 4, &mut rng);
        let data = Array2::from_shape_fn((10, 3), |_| rng.random_range(-1.0..1.0));
        let both = lstm.infer(&SeqBatch::new(data.clone(), 2, 5));
        let second = lstm.infer(&SeqBatch::single(data.slice(s![5.., ..]).to_owned()));
        for (a, b) in both.item(1).iter().zip(second.data.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut lstm = Lstm::new(3, 4, &mut rng);
        let mut x = Array2::from_shape_fn((12, 3), |_| rng.random_range(-1.0..1.0));
        let w = gradcheck::probe_weights(12, 4);
        let (_, cache) = lstm.forward(&SeqBatch::new(x.clone(), 2, 6));
        let dx = lstm.backward(cache, &w);
        let frozen = lstm.clone();
        let err = gradcheck::check(&mut x, &dx, &gradcheck::coords(12, 3, 12), 1e-2, |x| {
            gradcheck::weighted_sum(&frozen.infer(&SeqBatch::new(x.clone(), 2, 6)).data, &w)
        });
        assert!(err < 2e-3, "input {err}");

        for (name, mut value, grad) in [
            ("w_hh", lstm.w_hh.value.clone(), lstm.w_hh.grad.clone()),
            ("w_ih", lstm.w_ih.value.clone(), lstm.w_ih.grad.clone()),
            ("bias", lstm.bias.value.clone(), lstm.bias.grad.clone()),
        ] {
            let (r, c) = value.dim();
            let err = gradcheck::check(&mut value, &grad, &gradcheck::coords(r, c, 10), 1e-2, |v| {
                let mut l = frozen.clone();
                match name {
                    "w_hh" => l.w_hh.value = v.clone(),
                    "w_ih" => l.w_ih.value = v.clone(),
                    _ => l.bias.value = v.clone(),
                }
                gradcheck::weighted_sum(&l.infer(&SeqBatch::new(x.clone(), 2, 6)).data, &w)
            });
            assert!(err < 2e-3, "{name} {err}");
        }
    }
}
