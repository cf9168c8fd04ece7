//! Exact t-distributed stochastic neighbor embedding and the silhouette
//! score. Quadratic in the number of points, which is fine for a few
//! hundred utterances.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const EXAGGERATION: f64 = 12.0;
const EXAGGERATION_ITERS: usize = 250;

fn squared_distances(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Conditional neighbor distribution of row `i` at precision `beta`, and
/// its entropy in nats.
fn conditional(d: &Array2<f64>, i: usize, beta: f64) -> (Vec<f64>, f64) {
    let n = d.nrows();
    let min = (0..n).filter(|&j| j != i).map(|j| d[[i, j]]).fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = (0..n)
        .map(|j| if j == i { 0.0 } else { (-(d[[i, j]] - min) * beta).exp() })
        .collect();
    let z: f64 = p.iter().sum();
    let mut h = 0.0;
    for v in p.iter_mut() {
        *v /= z;
        if *v > 0.0 {
            h -= *v * v.ln();
        }
    }
    (p, h)
}

/// Row `i` holds the neighbor distribution of point `i`, with its
/// precision bisected until the entropy is `ln(perplexity)`.
pub fn conditional_probabilities(x: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let n = x.nrows();
    let d = squared_distances(x);
    let target = perplexity.ln();
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0, f64::INFINITY, 1.0);
        let mut row = Vec::new();
        for _ in 0..200 {
            let (r, h) = conditional(&d, i, beta);
            row = r;
            if (h - target).abs() < 1e-6 {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        for (j, v) in row.into_iter().enumerate() {
            p[[i, j]] = v;
        }
    }
    p
}

/// Symmetrized joint affinities.
pub fn joint_probabilities(x: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let n = x.nrows();
    let p = conditional_probabilities(x, perplexity);
    let pt = p.t().to_owned();
    ((p + pt) / (2.0 * n as f64)).mapv(|v| v.max(1e-12))
}

/// Embeds the rows of `x` in two dimensions.
pub fn tsne(x: &Array2<f64>, perplexity: f64, iterations: usize, seed: u64) -> Array2<f64> {
    let n = x.nrows();
    let perplexity = perplexity.min((n as f64 - 1.0) / 3.0).max(1.0);
    let p = joint_probabilities(x, perplexity);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid std");
    let mut y = Array2::from_shape_simple_fn((n, 2), || normal.sample(&mut rng));
    if n < 2 {
        return y;
    }
    let lr = (n as f64 / EXAGGERATION / 4.0).max(50.0);
    let mut update = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    for it in 0..iterations {
        let exaggeration = if it < EXAGGERATION_ITERS { EXAGGERATION } else { 1.0 };
        let momentum = if it < EXAGGERATION_ITERS { 0.5 } else { 0.8 };
        let mut num = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[[i, 0]] - y[[j, 0]];
                let dy = y[[i, 1]] - y[[j, 1]];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                num[[i, j]] = v;
                num[[j, i]] = v;
            }
        }
        let z = num.sum();
        let mut grad = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[[i, j]] / z).max(1e-12);
                let w = 4.0 * (exaggeration * p[[i, j]] - q) * num[[i, j]];
                grad[[i, 0]] += w * (y[[i, 0]] - y[[j, 0]]);
                grad[[i, 1]] += w * (y[[i, 1]] - y[[j, 1]]);
            }
        }
        for ((g, u), gain) in grad.iter().zip(update.iter_mut()).zip(gains.iter_mut()) {
            *gain = if (*g > 0.0) != (*u > 0.0) { *gain + 0.2 } else { *gain * 0.8 };
            *gain = gain.max(0.01);
            *u = momentum * *u - lr * *gain * g;
        }
        y += &update;
        let mean = y.mean_axis(ndarray::Axis(0)).expect("n > 0");
        y -= &mean;
    }
    y
}

/// Mean silhouette of labeled points. Points alone in their cluster score
/// 0. `None` when fewer than two clusters exist or every cluster is a
/// single point.
pub fn silhouette(points: &Array2<f64>, labels: &[usize]) -> Option<f64> {
    let n = points.nrows();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let clusters = sizes.iter().filter(|&&s| s > 0).count();
    if clusters < 2 || sizes.iter().all(|&s| s <= 1) {
        return None;
    }
    let d = squared_distances(points).mapv(f64::sqrt);
    let mut total = 0.0;
    for i in 0..n {
        if sizes[labels[i]] <= 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += d[[i, j]];
            }
        }
        let a = sums[labels[i]] / (sizes[labels[i]] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != labels[i] && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Some(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn silhouette_matches_hand_computation() {
        let pts = Array2::from_shape_vec((4, 1), vec![0.0, 1.0, 4.0, 5.0]).unwrap();
        let s = silhouette(&pts, &[0, 0, 1, 1]).unwrap();
        assert!((s - 94.0 / 126.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn silhouette_is_undefined_for_singletons() {
        let pts = Array2::from_shape_vec((3, 1), vec![0.0, 1.0, 4.0]).unwrap();
        assert_eq!(silhouette(&pts, &[0, 1, 2]), None);
        assert_eq!(silhouette(&pts, &[0, 0, 0]), None);
    }

    #[test]
    fn rows_are_calibrated_to_the_perplexity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array2::from_shape_simple_fn((30, 5), || rng.random_range(-1.0..1.0));
        let cond = conditional_probabilities(&x, 5.0);
        for (i, row) in cond.rows().into_iter().enumerate() {
            assert_eq!(row[i], 0.0);
            assert!((row.sum() - 1.0).abs() < 1e-12);
            let h: f64 = row.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
            assert!((h.exp() - 5.0).abs() < 1e-4, "row {i} perplexity {}", h.exp());
        }
        let p = joint_probabilities(&x, 5.0);
        assert!((p.sum() - 1.0).abs() < 1e-6);
        assert!((&p - &p.t()).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn separated_blobs_stay_separated_and_runs_repeat() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels: Vec<usize> = (0..40).map(|i| i / 20).collect();
        let x = Array2::from_shape_fn((40, 6), |(i, _)| labels[i] as f64 * 10.0 + rng.random_range(-1.0..1.0));
        let y = tsne(&x, 10.0, 1000, 3);
        assert!(silhouette(&y, &labels).unwrap() > 0.9);
        assert_eq!(y, tsne(&x, 10.0, 1000, 3));
    }
}
