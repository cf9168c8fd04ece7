//! Reconstruction and VQ objectives with explicit stop-gradient routing.
//!
//! All norms are mean-reduced over elements. Scalars are accumulated in f64.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::vq::{Codebook, ContentEmbedding};
use crate::error::{Error, Result};

pub const DEFAULT_BETA: f64 = 0.25;

/// Named scalar losses of one training step. `total` is always the sum of
/// the four parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub reconstruction: f64,
    pub codebook_term: f64,
    pub commitment_term: f64,
    pub cpc: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn new(reconstruction: f64, codebook_term: f64, commitment_term: f64, cpc: f64) -> Self {
        LossBundle {
            reconstruction,
            codebook_term,
            commitment_term,
            cpc,
            total: reconstruction + codebook_term + commitment_term + cpc,
        }
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("reconstruction", self.reconstruction),
            ("codebook", self.codebook_term),
            ("commitment", self.commitment_term),
            ("cpc", self.cpc),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Whether gradient flows into an operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Live,
    /// Treated as a constant: `sg[·]`.
    Stopped,
}

/// `weight · mean((a − b)²)` and its gradients. A stopped operand receives
/// an all-zero gradient.
pub fn weighted_mse(
    a: &Array2<f32>,
    a_flow: Flow,
    b: &Array2<f32>,
    b_flow: Flow,
    weight: f64,
) -> Result<(f64, Array2<f32>, Array2<f32>)> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    let n = a.len() as f64;
    let value = weight
        * a.iter()
            .zip(b.iter())
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
        / n;
    let coeff = (2.0 * weight / n) as f32;
    let diff = a - b;
    let da = match a_flow {
        Flow::Live => &diff * coeff,
        Flow::Stopped => Array2::zeros(a.raw_dim()),
    };
    let db = match b_flow {
        Flow::Live => &diff * -coeff,
        Flow::Stopped => Array2::zeros(b.raw_dim()),
    };
    Ok((value, da, db))
}

/// `mean|x − x̂| + mean (x − x̂)²` and its gradient w.r.t. `x̂`.
pub fn reconstruction_loss(x: &Array2<f32>, x_hat: &Array2<f32>) -> Result<(f64, Array2<f32>)> {
    if x.dim() != x_hat.dim() {
        return Err(Error::Shape(format!(
            "target {:?} vs reconstruction {:?}",
            x.dim(),
            x_hat.dim()
        )));
    }
    let n = x.len() as f64;
    let (mut l1, mut l2) = (0.0f64, 0.0f64);
    let mut grad = Array2::<f32>::zeros(x.raw_dim());
    Zip::from(&mut grad)
        .and(x)
        .and(x_hat)
        .for_each(|g, &xv, &yv| {
            let d = yv as f64 - xv as f64;
            l1 += d.abs();
            l2 += d * d;
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            *g = ((sign + 2.0 * d) / n) as f32;
        });
    Ok(((l1 + l2) / n, grad))
}

/// Mean absolute error, the evaluation-time reconstruction metric.
pub fn l1_distance(x: &Array2<f32>, x_hat: &Array2<f32>) -> f64 {
    x.iter()
        .zip(x_hat.iter())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum::<f64>()
        / x.len() as f64
}

/// Gradients of each VQ term w.r.t. each operand, kept separate so the
/// routing can be inspected.
#[derive(Clone, Debug)]
pub struct VqGrads {
    pub reconstruction_wrt_x_hat: Array2<f32>,
    pub codebook_wrt_e: Array2<f32>,
    pub codebook_wrt_codes: Array2<f32>,
    pub commitment_wrt_e: Array2<f32>,
    pub commitment_wrt_codes: Array2<f32>,
}

/// Reconstruction, codebook and commitment terms.
///
/// `codebook_term = mean‖sg[e] − q‖²` moves only the codes;
/// `commitment_term = β·mean‖e − sg[q]‖²` moves only the encoder.
/// The returned bundle has `cpc = 0`.
pub fn vq_loss(
    x: &Array2<f32>,
    x_hat: &Array2<f32>,
    e: &Array2<f32>,
    q: &ContentEmbedding,
    book: &Codebook,
    beta: f64,
) -> Result<(LossBundle, VqGrads)> {
    if beta < 0.0 {
        return Err(Error::config("beta", "must be non-negative"));
    }
    let qv = &q.quantized.data;
    let (rec, d_x_hat) = reconstruction_loss(x, x_hat)?;
    let (codebook_term, cb_e, cb_q) = weighted_mse(e, Flow::Stopped, qv, Flow::Live, 1.0)?;
    let (commitment_term, cm_e, cm_q) = weighted_mse(e, Flow::Live, qv, Flow::Stopped, beta)?;
    let scatter = |d_rows: &Array2<f32>| {
        let mut codes = Array2::<f32>::zeros(book.codes.value.raw_dim());
        for (r, &i) in q.indices.iter().enumerate() {
            let mut row = codes.row_mut(i);
            row += &d_rows.row(r);
        }
        codes
    };
    let grads = VqGrads {
        reconstruction_wrt_x_hat: d_x_hat,
        codebook_wrt_e: cb_e,
        codebook_wrt_codes: scatter(&cb_q),
        commitment_wrt_e: cm_e,
        commitment_wrt_codes: scatter(&cm_q),
    };
    Ok((LossBundle::new(rec, codebook_term, commitment_term, 0.0), grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::vq::quantize;
    use crate::nn::SeqBatch;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_reconstruction_and_quantization_is_zero() {
        let codes = Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f32);
        let book = Codebook::from_codes(codes.clone());
        let e = codes.clone();
        let q = quantize(&SeqBatch::single(e.clone()), &book).unwrap();
        let x = Array2::from_elem((5, 2), 0.3f32);
        let (b, _) = vq_loss(&x, &x, &e, &q, &book, DEFAULT_BETA).unwrap();
        assert_eq!(b.reconstruction, 0.0);
        assert_eq!(b.codebook_term, 0.0);
        assert_eq!(b.commitment_term, 0.0);
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn reconstruction_combines_l1_and_l2() {
        let x = Array2::from_shape_vec((1, 2), vec![0.0f32, 0.0]).unwrap();
        let y = Array2::from_shape_vec((1, 2), vec![1.0f32, -2.0]).unwrap();
        let (l, g) = reconstruction_loss(&x, &y).unwrap();
        // (1 + 2)/2 + (1 + 4)/2
        assert!((l - 4.0).abs() < 1e-12);
        assert!((g[[0, 0]] - 1.5).abs() < 1e-6);
        assert!((g[[0, 1]] + 2.5).abs() < 1e-6);
    }

    #[test]
    fn stopped_operands_get_exact_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let book = Codebook::from_codes(Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0)));
        let e = Array2::from_shape_fn((7, 3), |_| rng.random_range(-1.0..1.0));
        let q = quantize(&SeqBatch::single(e.clone()), &book).unwrap();
        let x = Array2::zeros((7, 2));
        let (_, g) = vq_loss(&x, &x, &e, &q, &book, 0.25).unwrap();
        assert!(g.codebook_wrt_e.iter().all(|&v| v == 0.0));
        assert!(g.commitment_wrt_codes.iter().all(|&v| v == 0.0));
        assert!(g.codebook_wrt_codes.iter().any(|&v| v != 0.0));
        assert!(g.commitment_wrt_e.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn negative_beta_and_shape_mismatch_are_rejected() {
        let book = Codebook::from_codes(Array2::zeros((2, 2)));
        let e = Array2::zeros((3, 2));
        let q = quantize(&SeqBatch::single(e.clone()), &book).unwrap();
        let x = Array2::zeros((3, 4));
        assert!(vq_loss(&x, &x, &e, &q, &book, -1.0).is_err());
        assert!(vq_loss(&x, &Array2::zeros((3, 5)), &e, &q, &book, 0.25).is_err());
    }

    #[test]
    fn bundle_total_is_sum_of_parts() {
        let b = LossBundle::new(0.5, 0.25, 0.125, 2.0);
        assert_eq!(b.total, 2.875);
        assert_eq!(b.non_finite_term(), None);
        assert_eq!(LossBundle::new(f64::NAN, 0.0, 0.0, 0.0).non_finite_term(), Some("reconstruction"));
    }
}
