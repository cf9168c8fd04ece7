//! Small classifiers trained on frozen features.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::EvalSettings;
use crate::error::{Error, Result};
use crate::nn::{Adam, ConvStack, Linear, Parameterized, SeqBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// Three convolutions over a sequence, one prediction per frame.
    Conv3,
    /// One linear layer over a single vector.
    Linear1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub channels: usize,
    pub kernel: usize,
    /// Examples (utterances) per update.
    pub batch: usize,
}

impl ProbeConfig {
    pub fn content(s: &EvalSettings) -> Self {
        ProbeConfig {
            kind: ProbeKind::Conv3,
            ..Self::speaker(s)
        }
    }

    pub fn speaker(s: &EvalSettings) -> Self {
        ProbeConfig {
            kind: ProbeKind::Linear1,
            epochs: s.probe_epochs,
            learning_rate: s.probe_learning_rate,
            seed: s.probe_seed,
            channels: s.probe_channels,
            kernel: s.probe_kernel,
            batch: s.probe_batch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.channels == 0 || self.batch == 0 || self.kernel % 2 == 0 {
            return Err(Error::config("eval.probe", "epochs, channels and batch must be positive and the kernel odd"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("eval.probe_learning_rate", "must be positive"));
        }
        Ok(())
    }
}

/// Per-column standardization fitted on training rows.
#[derive(Clone, Debug)]
pub struct Standardizer {
    mean: Array1<f32>,
    inv_std: Array1<f32>,
}

impl Standardizer {
    pub fn fit<'a>(blocks: impl IntoIterator<Item = &'a Array2<f32>>) -> Self {
        let mut n = 0usize;
        let mut sum: Option<Array1<f64>> = None;
        let mut sq: Option<Array1<f64>> = None;
        for b in blocks {
            let b64 = b.mapv(|v| v as f64);
            let s = b64.sum_axis(Axis(0));
            let q = b64.mapv(|v| v * v).sum_axis(Axis(0));
            sum = Some(sum.map_or(s.clone(), |a| a + &s));
            sq = Some(sq.map_or(q.clone(), |a| a + &q));
            n += b.nrows();
        }
        let sum = sum.expect("at least one block");
        let sq = sq.expect("at least one block");
        let n = n.max(1) as f64;
        let mean = &sum / n;
        let var = (&sq / n - &mean * &mean).mapv(|v| v.max(0.0));
        Standardizer {
            mean: mean.mapv(|v| v as f32),
            inv_std: var.mapv(|v| 1.0 / (v.sqrt() as f32 + 1e-5)),
        }
    }

    pub fn apply(&self, x: &Array2<f32>) -> Array2<f32> {
        (x - &self.mean) * &self.inv_std
    }
}

/// Mean cross-entropy over rows and its gradient with respect to `logits`,
/// scaled by `1 / norm`.
pub fn softmax_cross_entropy(logits: &Array2<f32>, labels: &[usize], norm: f64) -> (f64, Array2<f32>) {
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (r, (row, &y)) in logits.rows().into_iter().zip(labels).enumerate() {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        loss += z.ln() + max - row[y] as f64;
        for (k, &v) in row.iter().enumerate() {
            let p = (v as f64 - max).exp() / z;
            grad[[r, k]] = ((p - if k == y { 1.0 } else { 0.0 }) / norm) as f32;
        }
    }
    (loss / norm, grad)
}

fn argmax_rows(logits: &Array2<f32>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn check_labels(n_inputs: usize, labels: usize, max_label: Option<usize>, n_classes: usize) -> Result<()> {
    if n_inputs != labels {
        return Err(Error::Shape(format!("{n_inputs} inputs but {labels} label sets")));
    }
    if n_inputs == 0 {
        return Err(Error::Shape("no training examples".into()));
    }
    if let Some(m) = max_label {
        if m >= n_classes {
            return Err(Error::Shape(format!("label {m} outside {n_classes} classes")));
        }
    }
    Ok(())
}

/// Percentage of positions where `pred` equals `truth`.
pub fn percent_correct(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    100.0 * hits as f64 / truth.len() as f64
}

/// Per-frame classifier: three convolutions, LeakyReLU between them.
#[derive(Clone, Debug)]
pub struct FrameClassifier {
    norm: Standardizer,
    net: ConvStack,
    pub n_classes: usize,
}

impl FrameClassifier {
    /// Trains on `[T × C]` sequences with one label per frame.
    pub fn train(inputs: &[Array2<f32>], labels: &[Vec<usize>], n_classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        cfg.validate()?;
        let max_label = labels.iter().flatten().max().copied();
        check_labels(inputs.len(), labels.len(), max_label, n_classes)?;
        for (x, y) in inputs.iter().zip(labels) {
            if x.nrows() != y.len() {
                return Err(Error::Shape(format!("{} frames but {} labels", x.nrows(), y.len())));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let norm = Standardizer::fit(inputs);
        let width = inputs[0].ncols();
        let net = ConvStack::new(width, &[cfg.channels, cfg.channels, n_classes], cfg.kernel, &mut rng);
        let mut probe = FrameClassifier { norm, net, n_classes };
        if n_classes < 2 {
            return Ok(probe);
        }
        let xs: Vec<SeqBatch> = inputs.iter().map(|x| SeqBatch::single(probe.norm.apply(x))).collect();
        let mut adam = Adam::new(cfg.learning_rate as f32);
        let mut order: Vec<usize> = (0..xs.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch) {
                let frames: usize = chunk.iter().map(|&i| xs[i].len).sum();
                probe.net.zero_grad();
                for &i in chunk {
                    let (logits, cache) = probe.net.forward(&xs[i]);
                    let (_, dlogits) = softmax_cross_entropy(&logits.data, &labels[i], frames as f64);
                    probe.net.backward(cache, &dlogits);
                }
                adam.step(&mut probe.net);
            }
        }
        Ok(probe)
    }

    pub fn predict(&self, x: &Array2<f32>) -> Vec<usize> {
        if self.n_classes < 2 {
            return vec![0; x.nrows()];
        }
        argmax_rows(&self.net.infer(&SeqBatch::single(self.norm.apply(x))).data)
    }

    /// Frame-weighted accuracy in percent.
    pub fn accuracy(&self, inputs: &[Array2<f32>], labels: &[Vec<usize>]) -> f64 {
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for (x, y) in inputs.iter().zip(labels) {
            pred.extend(self.predict(x));
            truth.extend_from_slice(y);
        }
        percent_correct(&pred, &truth)
    }
}

/// One linear layer with softmax over standardized vectors.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    norm: Standardizer,
    layer: Linear,
    pub n_classes: usize,
}

impl LinearClassifier {
    /// Trains on the rows of `features` (`[N × C]`).
    pub fn train(features: &Array2<f32>, labels: &[usize], n_classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        cfg.validate()?;
        check_labels(features.nrows(), labels.len(), labels.iter().max().copied(), n_classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let norm = Standardizer::fit([features]);
        let layer = Linear::new(features.ncols(), n_classes.max(1), &mut rng);
        let mut probe = LinearClassifier { norm, layer, n_classes };
        if n_classes < 2 {
            return Ok(probe);
        }
        let x = probe.norm.apply(features);
        let mut adam = Adam::new(cfg.learning_rate as f32);
        let mut order: Vec<usize> = (0..x.nrows()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch) {
                let xb = x.select(Axis(0), chunk);
                let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                probe.layer.zero_grad();
                let (logits, cache) = probe.layer.forward(&xb);
                let (_, dlogits) = softmax_cross_entropy(&logits, &yb, chunk.len() as f64);
                probe.layer.backward(cache, &dlogits);
                adam.step(&mut probe.layer);
            }
        }
        Ok(probe)
    }

    pub fn predict(&self, features: &Array2<f32>) -> Vec<usize> {
        if self.n_classes < 2 {
            return vec![0; features.nrows()];
        }
        argmax_rows(&self.layer.infer(&self.norm.apply(features)))
    }

    pub fn accuracy(&self, features: &Array2<f32>, labels: &[usize]) -> f64 {
        percent_correct(&self.predict(features), labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg(kind: ProbeKind) -> ProbeConfig {
        ProbeConfig {
            kind,
            epochs: 20,
            learning_rate: 1e-2,
            seed: 0,
            channels: 16,
            kernel: 3,
            batch: 4,
        }
    }

    #[test]
    fn cross_entropy_matches_closed_form() {
        let logits = Array2::from_shape_vec((1, 3), vec![1.0f32, 2.0, 3.0]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[0], 1.0);
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        assert!((loss - (z.ln() - 1.0)).abs() < 1e-9);
        assert!((grad[[0, 0]] as f64 - (1f64.exp() / z - 1.0)).abs() < 1e-6);
        assert!((grad[[0, 2]] as f64 - 3f64.exp() / z).abs() < 1e-6);
    }

    #[test]
    fn linear_probe_separates_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels: Vec<usize> = (0..120).map(|i| i % 3).collect();
        let x = Array2::from_shape_fn((120, 5), |(i, j)| {
            (if j == labels[i] { 3.0 } else { 0.0 }) + rng.random_range(-0.5f32..0.5)
        });
        let p = LinearClassifier::train(&x, &labels, 3, &cfg(ProbeKind::Linear1)).unwrap();
        assert_eq!(p.accuracy(&x, &labels), 100.0);
    }

    #[test]
    fn frame_probe_learns_sign_of_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs: Vec<Array2<f32>> = (0..8)
            .map(|_| Array2::from_shape_fn((30, 4), |_| rng.random_range(-1.0f32..1.0)))
            .collect();
        let labels: Vec<Vec<usize>> = inputs
            .iter()
            .map(|x| x.column(1).iter().map(|&v| (v > 0.0) as usize).collect())
            .collect();
        let p = FrameClassifier::train(&inputs, &labels, 2, &cfg(ProbeKind::Conv3)).unwrap();
        assert!(p.accuracy(&inputs, &labels) > 90.0);
    }

    #[test]
    fn one_class_is_certain() {
        let x = Array2::<f32>::ones((5, 2));
        let p = LinearClassifier::train(&x, &[0; 5], 1, &cfg(ProbeKind::Linear1)).unwrap();
        assert_eq!(p.accuracy(&x, &[0; 5]), 100.0);
    }

    #[test]
    fn mismatched_labels_are_errors() {
        let x = Array2::<f32>::ones((5, 2));
        assert!(LinearClassifier::train(&x, &[0; 4], 2, &cfg(ProbeKind::Linear1)).is_err());
        assert!(LinearClassifier::train(&x, &[0, 1, 2, 0, 1], 2, &cfg(ProbeKind::Linear1)).is_err());
        let seq = vec![Array2::<f32>::ones((5, 2))];
        assert!(FrameClassifier::train(&seq, &[vec![0; 4]], 2, &cfg(ProbeKind::Conv3)).is_err());
    }

    #[test]
    fn training_is_seeded() {
        let x = Array2::from_shape_fn((20, 3), |(i, j)| ((i * 7 + j * 3) % 5) as f32);
        let y: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let a = LinearClassifier::train(&x, &y, 2, &cfg(ProbeKind::Linear1)).unwrap();
        let b = LinearClassifier::train(&x, &y, 2, &cfg(ProbeKind::Linear1)).unwrap();
        assert_eq!(a.layer.infer(&x), b.layer.infer(&x));
    }
}
