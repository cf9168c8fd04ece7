//! Contrastive predictive coding over the quantized sequence.
//!
//! A recurrent context network summarizes `q_1..q_t` into `c_t`; predictor
//! `k` maps `c_t` to a guess of `q_{t+k}` that is scored by dot product
//! against the true frame and `n_negatives` frames drawn from the batch.
//! The loss is InfoNCE, averaged over every valid `(item, t, k)`.

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Linear, LinearCache, Lstm, LstmCache, Param, Parameterized, SeqBatch};

/// Where negatives are drawn from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    /// Any frame of any item in the batch.
    #[default]
    Batch,
    /// Other frames of the same item only.
    SameUtterance,
}

#[derive(Clone, Debug)]
pub struct CpcModule {
    pub context: Lstm,
    /// All `K` predictors stacked: `[D_ctx × K·D]`.
    pub predictors: Linear,
    pub horizon: usize,
    pub n_negatives: usize,
    pub negatives_from: NegativeSource,
}

/// `-log softmax(logits)[0]`; index 0 is the positive.
pub fn info_nce(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[0]
}

struct Triple {
    /// Row of the context frame in the batch.
    anchor: usize,
    k: usize,
    /// Positive first, then negatives.
    candidates: Vec<usize>,
    probs: Vec<f64>,
}

pub struct CpcCache {
    lstm: LstmCache,
    pred: LinearCache,
    predictions: Array2<f32>,
    targets: Array2<f32>,
    triples: Vec<Triple>,
}

impl CpcModule {
    pub fn new(
        dim: usize,
        context_dim: usize,
        horizon: usize,
        n_negatives: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(horizon >= 1 && n_negatives >= 1);
        CpcModule {
            context: Lstm::new(dim, context_dim, rng),
            predictors: Linear::new(context_dim, horizon * dim, rng),
            horizon,
            n_negatives,
            negatives_from: NegativeSource::Batch,
        }
    }

    pub fn dim(&self) -> usize {
        self.predictors.d_out() / self.horizon
    }

    fn draw_negatives(
        &self,
        positive: usize,
        item: usize,
        q: &SeqBatch,
        rng: &mut impl Rng,
    ) -> Result<Vec<usize>> {
        let (start, size) = match self.negatives_from {
            NegativeSource::Batch => (0, q.batch * q.len),
            NegativeSource::SameUtterance => (item * q.len, q.len),
        };
        if size < self.n_negatives + 1 {
            return Err(Error::Sampling(format!(
                "pool of {} frames cannot supply {} negatives besides the positive",
                size, self.n_negatives
            )));
        }
        let mut out = Vec::with_capacity(self.n_negatives);
        while out.len() < self.n_negatives {
            let mut r = start + rng.random_range(0..size - 1);
            if r >= positive {
                r += 1;
            }
            if !out.contains(&r) {
                out.push(r);
            }
        }
        Ok(out)
    }

    /// Loss and cache for [`CpcModule::backward`]. `q` is the decoder-facing
    /// quantized view and doubles as the negative pool.
    pub fn forward(&self, q: &SeqBatch, rng: &mut impl Rng) -> Result<(f64, CpcCache)> {
        if q.len <= self.horizon {
            return Err(Error::SequenceTooShort {
                len: q.len,
                horizon: self.horizon,
            });
        }
        let d = self.dim();
        if q.channels() != d {
            return Err(Error::Shape(format!(
                "cpc expects width {d}, got {}",
                q.channels()
            )));
        }
        let (ctx, lstm) = self.context.forward(q);
        let (predictions, pred) = self.predictors.forward(&ctx.data);
        let targets = q.data.as_standard_layout().into_owned();

        let mut triples = Vec::new();
        let mut total = 0.0f64;
        let mut logits = vec![0.0f64; self.n_negatives + 1];
        for b in 0..q.batch {
            for k in 1..=self.horizon {
                for t in 0..q.len - k {
                    let anchor = b * q.len + t;
                    let positive = anchor + k;
                    let mut candidates = vec![positive];
                    candidates.extend(self.draw_negatives(positive, b, q, rng)?);
                    let z = predictions.slice(s![anchor, (k - 1) * d..k * d]);
                    for (l, &c) in logits.iter_mut().zip(&candidates) {
                        *l = z
                            .iter()
                            .zip(targets.row(c).iter())
                            .map(|(&a, &b)| a as f64 * b as f64)
                            .sum();
                    }
                    total += info_nce(&logits);
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
                    let norm: f64 = exps.iter().sum();
                    triples.push(Triple {
                        anchor,
                        k,
                        candidates,
                        probs: exps.iter().map(|e| e / norm).collect(),
                    });
                }
            }
        }
        let loss = total / triples.len() as f64;
        Ok((
            loss,
            CpcCache {
                lstm,
                pred,
                predictions,
                targets,
                triples,
            },
        ))
    }

    /// Accumulates parameter gradients of `scale · loss` and returns its
    /// gradient w.r.t. the quantized input.
    pub fn backward(&mut self, cache: CpcCache, scale: f64) -> Array2<f32> {
        let d = self.dim();
        let per = scale / cache.triples.len() as f64;
        let mut d_pred = Array2::<f32>::zeros(cache.predictions.raw_dim());
        let mut d_q = Array2::<f32>::zeros(cache.targets.raw_dim());
        for tr in &cache.triples {
            let cols = (tr.k - 1) * d..tr.k * d;
            let z = cache.predictions.slice(s![tr.anchor, cols.clone()]);
            for (n, (&c, &p)) in tr.candidates.iter().zip(&tr.probs).enumerate() {
                let g = ((p - if n == 0 { 1.0 } else { 0.0 }) * per) as f32;
                if g == 0.0 {
                    continue;
                }
                let mut dz = d_pred.slice_mut(s![tr.anchor, cols.clone()]);
                dz.scaled_add(g, &cache.targets.row(c));
                let mut dq = d_q.row_mut(c);
                dq.scaled_add(g, &z);
            }
        }
        let d_ctx = self.predictors.backward(cache.pred, &d_pred);
        d_q + self.context.backward(cache.lstm, &d_ctx)
    }
}

impl Parameterized for CpcModule {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.context.visit(&join(prefix, "context"), f);
        self.predictors.visit(&join(prefix, "predictors"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.context.visit_mut(&join(prefix, "context"), f);
        self.predictors.visit_mut(&join(prefix, "predictors"), f);
    }
}
