//! Vector quantization against a learnable codebook.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Param, Parameterized, SeqBatch};

/// `V × D` matrix of code vectors.
#[derive(Clone, Debug)]
pub struct Codebook {
    pub codes: Param,
}

impl Codebook {
    /// Codes drawn i.i.d. uniform in `[-1/V, 1/V]`.
    pub fn new(size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        assert!(size >= 1 && dim >= 1);
        Codebook {
            codes: Param::uniform(size, dim, 1.0 / size as f32, rng),
        }
    }

    pub fn from_codes(codes: Array2<f32>) -> Self {
        Codebook {
            codes: Param::new(codes),
        }
    }

    pub fn size(&self) -> usize {
        self.codes.value.nrows()
    }

    pub fn dim(&self) -> usize {
        self.codes.value.ncols()
    }

    /// Index of the nearest code by squared Euclidean distance; the lowest
    /// index wins ties.
    pub fn nearest(&self, e: &[f32]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, code) in self.codes.value.rows().into_iter().enumerate() {
            let d: f64 = code
                .iter()
                .zip(e)
                .map(|(&c, &x)| {
                    let diff = x as f64 - c as f64;
                    diff * diff
                })
                .sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Gathers code rows: `out[r] = codes[indices[r]]`.
    pub fn lookup(&self, indices: &[usize]) -> Array2<f32> {
        let mut out = Array2::zeros((indices.len(), self.dim()));
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).assign(&self.codes.value.row(i));
        }
        out
    }

    /// Adds per-row gradients into the rows of the codes they came from.
    pub fn scatter_grad(&mut self, indices: &[usize], d_rows: &Array2<f32>) {
        for (r, &i) in indices.iter().enumerate() {
            let mut g = self.codes.grad.row_mut(i);
            g += &d_rows.row(r);
        }
    }
}

impl Parameterized for Codebook {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(crate::nn::join(prefix, "codes"), &self.codes);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(crate::nn::join(prefix, "codes"), &mut self.codes);
    }
}

/// Quantized sequence `Q` and the code index chosen for every frame.
///
/// Downstream consumers read [`ContentEmbedding::decoder_view`]. Its values
/// are the code vectors, but its gradient is routed to the encoder output
/// unchanged (straight-through): see [`straight_through_backward`].
#[derive(Clone, Debug)]
pub struct ContentEmbedding {
    pub quantized: SeqBatch,
    pub indices: Vec<usize>,
}

impl ContentEmbedding {
    pub fn decoder_view(&self) -> &SeqBatch {
        &self.quantized
    }

    pub fn len(&self) -> usize {
        self.quantized.len
    }

    pub fn is_empty(&self) -> bool {
        self.quantized.len == 0
    }
}

pub fn quantize(e: &SeqBatch, book: &Codebook) -> Result<ContentEmbedding> {
    if e.channels() != book.dim() {
        return Err(Error::Shape(format!(
            "encoder width {} does not match code dimension {}",
            e.channels(),
            book.dim()
        )));
    }
    let data = e.data.as_standard_layout();
    let indices: Vec<usize> = data
        .rows()
        .into_iter()
        .map(|row| book.nearest(row.as_slice().expect("standard layout")))
        .collect();
    let quantized = e.with_data(book.lookup(&indices));
    Ok(ContentEmbedding { quantized, indices })
}

/// Gradient w.r.t. the encoder output given the gradient w.r.t. the
/// decoder-facing view. Identity.
pub fn straight_through_backward(d_view: &Array2<f32>) -> Array2<f32> {
    d_view.clone()
}
