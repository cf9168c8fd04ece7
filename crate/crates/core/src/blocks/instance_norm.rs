//! Per-utterance, per-channel standardization over time.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::SeqBatch;

pub const EPS: f64 = 1e-5;

pub struct InstanceNormCache {
    normalized: Array2<f32>,
    /// `[batch × channels]` divisors.
    scale: Array2<f64>,
    batch: usize,
    len: usize,
}

/// Normalizes every channel of every item to zero mean and unit standard
/// deviation over time.
///
/// The divisor is `sqrt(σ² + ε²)`: a constant channel maps to zeros, and for
/// `σ ≫ ε` the result is affine invariant, `IN(a·E + b) = IN(E)` for `a > 0`.
pub fn instance_norm(e: &SeqBatch) -> Result<(SeqBatch, InstanceNormCache)> {
    if e.len < 2 {
        return Err(Error::DegenerateInput(format!(
            "instance norm needs at least 2 frames, got {}",
            e.len
        )));
    }
    let (batch, len, ch) = (e.batch, e.len, e.channels());
    let mut normalized = Array2::<f32>::zeros((batch * len, ch));
    let mut scale = Array2::<f64>::zeros((batch, ch));
    for b in 0..batch {
        let item = e.item(b);
        for c in 0..ch {
            let col = item.column(c);
            let mean = col.iter().map(|&v| v as f64).sum::<f64>() / len as f64;
            let var = col
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / len as f64;
            let s = (var + EPS * EPS).sqrt();
            scale[[b, c]] = s;
            for (t, &v) in col.iter().enumerate() {
                normalized[[b * len + t, c]] = ((v as f64 - mean) / s) as f32;
            }
        }
    }
    let out = e.with_data(normalized.clone());
    Ok((
        out,
        InstanceNormCache {
            normalized,
            scale,
            batch,
            len,
        },
    ))
}

pub fn instance_norm_backward(cache: &InstanceNormCache, dy: &Array2<f32>) -> Array2<f32> {
    let (batch, len) = (cache.batch, cache.len);
    let ch = dy.ncols();
    let mut dx = Array2::<f32>::zeros(dy.raw_dim());
    for b in 0..batch {
        for c in 0..ch {
            let rows = b * len..(b + 1) * len;
            let (mut mean_dy, mut mean_dyy) = (0.0f64, 0.0f64);
            for r in rows.clone() {
                let g = dy[[r, c]] as f64;
                mean_dy += g;
                mean_dyy += g * cache.normalized[[r, c]] as f64;
            }
            mean_dy /= len as f64;
            mean_dyy /= len as f64;
            let s = cache.scale[[b, c]];
            for r in rows {
                let y = cache.normalized[[r, c]] as f64;
                dx[[r, c]] = ((dy[[r, c]] as f64 - mean_dy - y * mean_dyy) / s) as f32;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn channel_stats(x: &Array2<f32>, c: usize) -> (f64, f64) {
        let n = x.nrows() as f64;
        let mean = x.column(c).iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x.column(c).iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    #[test]
    fn random_input_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array2::from_shape_fn((64, 16), |(_, c)| rng.random_range(-1.0..1.0) * (c as f32 + 1.0) + 3.0);
        let (y, _) = instance_norm(&SeqBatch::single(x)).unwrap();
        for c in 0..16 {
            let (m, s) = channel_stats(&y.data, c);
            assert!(m.abs() < 1e-6, "mean {m}");
            assert!((s - 1.0).abs() < 1e-3, "std {s}");
        }
    }

    #[test]
    fn standardized_input_is_a_fixpoint() {
        let x = Array2::from_shape_fn((4, 1), |(t, _)| [1.0f32, -1.0, 1.0, -1.0][t]);
        let (y, _) = instance_norm(&SeqBatch::single(x.clone())).unwrap();
        for (a, b) in y.data.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let x = Array2::from_elem((10, 2), 7.5f32);
        let (y, _) = instance_norm(&SeqBatch::single(x)).unwrap();
        assert!(y.data.iter().all(|v| v.abs() < 1e-6 && v.is_finite()));
    }

    #[test]
    fn single_frame_is_rejected() {
        let x = SeqBatch::single(Array2::zeros((1, 3)));
        assert!(matches!(instance_norm(&x), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn affine_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Array2::from_shape_fn((32, 6), |_| rng.random_range(-1.0..1.0));
        let a: Vec<f32> = (0..6).map(|c| [0.1, 0.5, 1.0, 2.0, 7.0, 10.0][c]).collect();
        let shifted = Array2::from_shape_fn((32, 6), |(t, c)| a[c] * x[[t, c]] + (c as f32 - 2.5));
        let (y0, _) = instance_norm(&SeqBatch::single(x)).unwrap();
        let (y1, _) = instance_norm(&SeqBatch::single(shifted)).unwrap();
        for (p, q) in y0.data.iter().zip(y1.data.iter()) {
            assert!((p - q).abs() < 1e-5);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut x = Array2::from_shape_fn((12, 3), |_| rng.random_range(-1.0..1.0));
        let w = gradcheck::probe_weights(12, 3);
        let (_, cache) = instance_norm(&SeqBatch::new(x.clone(), 2, 6)).unwrap();
        let dx = instance_norm_backward(&cache, &w);
        let err = gradcheck::check(&mut x, &dx, &gradcheck::coords(12, 3, 12), 1e-2, |x| {
            let (y, _) = instance_norm(&SeqBatch::new(x.clone(), 2, 6)).unwrap();
            gradcheck::weighted_sum(&y.data, &w)
        });
        assert!(err < 2e-3, "{err}");
    }
}
