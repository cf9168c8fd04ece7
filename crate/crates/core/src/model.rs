//! Content encoder, speaker encoder and decoder assembled into one network.
//!
//! ```text
//! x_content ─ conv×5 ─ IN ─ VQ ─ Q ──┬──────────────┐
//!                                    └─ CPC          ├─ concat ─ decoder ─ x̂
//! x_speaker ─ conv×3 ─ mean over time ─ replicate ─ S┘
//! ```

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    instance_norm, instance_norm_backward, quantize, straight_through_backward, vq_loss, Codebook,
    ContentEmbedding, CpcModule, LossBundle, NegativeSource, DEFAULT_BETA,
};
use crate::error::{Error, Result};
use crate::features::mel::N_MELS;
use crate::features::MelSpectrogram;
use crate::nn::{
    join, relu, relu_backward, time_mean, time_mean_backward, replicate, BatchNorm1d, BatchNormCache,
    Conv1d, ConvCache, ConvStack, Linear, LinearCache, Lstm, LstmCache, Param, Parameterized,
    SeqBatch,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kernel: usize,
    /// Widths of the content convolutions before the last one.
    pub content_channels: Vec<usize>,
    /// Code dimension `D`, also the width of the last content convolution.
    pub content_dim: usize,
    /// Number of codes `V`.
    pub codebook_size: usize,
    /// Widths of the speaker convolutions before the last one.
    pub speaker_channels: Vec<usize>,
    pub speaker_dim: usize,
    pub decoder_width: usize,
    pub decoder_layers: usize,
    pub decoder_hidden: usize,
    pub context_dim: usize,
    /// CPC prediction horizon `K`.
    pub horizon: usize,
    pub n_negatives: usize,
    pub negatives_from: NegativeSource,
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            kernel: 5,
            content_channels: vec![512; 4],
            content_dim: 512,
            codebook_size: 2048,
            speaker_channels: vec![256, 256],
            speaker_dim: 512,
            decoder_width: 512,
            decoder_layers: 5,
            decoder_hidden: 512,
            context_dim: 256,
            horizon: 34,
            n_negatives: 20,
            negatives_from: NegativeSource::Batch,
        }
    }

    pub fn desk() -> Self {
        ModelConfig {
            kernel: 5,
            content_channels: vec![128; 4],
            content_dim: 64,
            codebook_size: 256,
            speaker_channels: vec![64, 64],
            speaker_dim: 128,
            decoder_width: 128,
            decoder_layers: 5,
            decoder_hidden: 128,
            context_dim: 64,
            horizon: 12,
            n_negatives: 8,
            negatives_from: NegativeSource::Batch,
        }
    }

    pub fn decoder_input(&self) -> usize {
        self.content_dim + self.speaker_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("kernel", self.kernel),
            ("content_dim", self.content_dim),
            ("codebook_size", self.codebook_size),
            ("speaker_dim", self.speaker_dim),
            ("decoder_width", self.decoder_width),
            ("decoder_layers", self.decoder_layers),
            ("decoder_hidden", self.decoder_hidden),
            ("context_dim", self.context_dim),
            ("horizon", self.horizon),
            ("n_negatives", self.n_negatives),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{key}"), "must be positive"));
            }
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config("model.kernel", "must be odd for same padding"));
        }
        if self.content_channels.iter().chain(&self.speaker_channels).any(|&c| c == 0) {
            return Err(Error::config("model.content_channels", "widths must be positive"));
        }
        Ok(())
    }
}

/// Multipliers of the four loss terms. `commitment` is β.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub cpc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            reconstruction: 1.0,
            codebook: 1.0,
            commitment: DEFAULT_BETA,
            cpc: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ContentEncoder {
    pub convs: ConvStack,
    pub codebook: Codebook,
    pub cpc: CpcModule,
}

#[derive(Clone, Debug)]
pub struct SpeakerEncoder {
    pub convs: ConvStack,
}

/// Conv/BatchNorm/ReLU blocks with identity skips wherever the width is
/// unchanged, then an LSTM and a projection to mel bins.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub convs: Vec<Conv1d>,
    pub norms: Vec<BatchNorm1d>,
    pub lstm: Lstm,
    pub out: Linear,
}

struct DecoderCache {
    blocks: Vec<(ConvCache, BatchNormCache, Array2<f32>)>,
    lstm: LstmCache,
    out: LinearCache,
}

impl Decoder {
    fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut c = cfg.decoder_input();
        for _ in 0..cfg.decoder_layers {
            convs.push(Conv1d::new(c, cfg.decoder_width, cfg.kernel, rng));
            norms.push(BatchNorm1d::new(cfg.decoder_width));
            c = cfg.decoder_width;
        }
        Decoder {
            convs,
            norms,
            lstm: Lstm::new(cfg.decoder_width, cfg.decoder_hidden, rng),
            out: Linear::new(cfg.decoder_hidden, N_MELS, rng),
        }
    }

    pub fn input_width(&self) -> usize {
        self.convs[0].c_in
    }

    fn infer(&self, z: &SeqBatch) -> SeqBatch {
        let mut h = z.clone();
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            let act = relu(&norm.infer(&conv.infer(&h).data));
            h.data = if conv.c_in == conv.c_out { &h.data + &act } else { act };
        }
        let h = self.lstm.infer(&h);
        h.with_data(self.out.infer(&h.data))
    }

    fn forward(&mut self, z: &SeqBatch) -> (SeqBatch, DecoderCache) {
        let mut h = z.clone();
        let mut blocks = Vec::with_capacity(self.convs.len());
        for (conv, norm) in self.convs.iter().zip(self.norms.iter_mut()) {
            let (y, cc) = conv.forward(&h);
            let (pre, bc) = norm.forward(&y.data);
            let act = relu(&pre);
            h.data = if conv.c_in == conv.c_out { &h.data + &act } else { act };
            blocks.push((cc, bc, pre));
        }
        let (h, lstm) = self.lstm.forward(&h);
        let (y, out) = self.out.forward(&h.data);
        (h.with_data(y), DecoderCache { blocks, lstm, out })
    }

    fn backward(&mut self, cache: DecoderCache, dy: &Array2<f32>) -> Array2<f32> {
        let d = self.out.backward(cache.out, dy);
        let mut d = self.lstm.backward(cache.lstm, &d);
        let layers = self.convs.iter_mut().zip(self.norms.iter_mut());
        for ((conv, norm), (cc, bc, pre)) in layers.zip(cache.blocks).rev() {
            let d_pre = relu_backward(&pre, &d);
            let d_conv = norm.backward(bc, &d_pre);
            let d_in = conv.backward(cc, &d_conv);
            d = if conv.c_in == conv.c_out { d + d_in } else { d_in };
        }
        d
    }
}

/// Per-item speaker vectors `S` and their replication along time.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding {
    /// `[batch × speaker_dim]`.
    pub vectors: Array2<f32>,
    pub replicated: SeqBatch,
}

#[derive(Clone, Debug)]
pub struct ForwardResult {
    pub x_hat: SeqBatch,
    /// Content encoder output after instance normalization.
    pub encoded: SeqBatch,
    pub content: ContentEmbedding,
    pub speaker: SpeakerEmbedding,
    pub context: SeqBatch,
}

#[derive(Clone, Debug)]
pub struct NoiseVc {
    pub config: ModelConfig,
    pub content: ContentEncoder,
    pub speaker: SpeakerEncoder,
    pub decoder: Decoder,
}

/// Loss gradients captured inside [`NoiseVc::train_pass_tapped`].
#[derive(Clone, Debug, Default)]
pub struct GradientTaps {
    /// With respect to the quantized view the decoder and CPC read.
    pub quantized_view: Array2<f32>,
    /// With respect to the instance-normalized encoder output.
    pub encoded: Array2<f32>,
}

/// Stacks mels of equal length into a time-major batch.
pub fn mel_batch(mels: &[&MelSpectrogram]) -> Result<SeqBatch> {
    let frames: Vec<Array2<f32>> = mels.iter().map(|m| m.frames()).collect();
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    SeqBatch::from_items(&views)
}

/// Item `b` of a `[B·T × 80]` batch as a mel spectrogram.
pub fn batch_item_mel(x: &SeqBatch, b: usize) -> Result<MelSpectrogram> {
    MelSpectrogram::from_frames(x.item(b))
}

fn check_mel_width(x: &SeqBatch, what: &str) -> Result<()> {
    if x.channels() != N_MELS {
        return Err(Error::Shape(format!(
            "{what} input needs {N_MELS} mel bins, got {}",
            x.channels()
        )));
    }
    Ok(())
}

impl NoiseVc {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut content_widths = config.content_channels.clone();
        content_widths.push(config.content_dim);
        let mut speaker_widths = config.speaker_channels.clone();
        speaker_widths.push(config.speaker_dim);
        let content_convs = ConvStack::new(N_MELS, &content_widths, config.kernel, rng);
        let codebook = Codebook::new(config.codebook_size, config.content_dim, rng);
        let mut cpc = CpcModule::new(
            config.content_dim,
            config.context_dim,
            config.horizon,
            config.n_negatives,
            rng,
        );
        cpc.negatives_from = config.negatives_from;
        let speaker = SpeakerEncoder {
            convs: ConvStack::new(N_MELS, &speaker_widths, config.kernel, rng),
        };
        let decoder = Decoder::new(&config, rng);
        Ok(NoiseVc {
            content: ContentEncoder {
                convs: content_convs,
                codebook,
                cpc,
            },
            speaker,
            decoder,
            config,
        })
    }

    /// Conv stack, instance norm and quantization, in inference mode.
    pub fn encode_content(&self, x: &SeqBatch) -> Result<(SeqBatch, ContentEmbedding)> {
        check_mel_width(x, "content")?;
        let (e, _) = instance_norm(&self.content.convs.infer(x))?;
        let q = quantize(&e, &self.content.codebook)?;
        Ok((e, q))
    }

    /// Time-averaged speaker vectors replicated to `target_len` frames.
    pub fn encode_speaker(&self, x: &SeqBatch, target_len: usize) -> Result<SpeakerEmbedding> {
        check_mel_width(x, "speaker")?;
        let vectors = time_mean(&self.speaker.convs.infer(x));
        let replicated = replicate(&vectors, target_len);
        Ok(SpeakerEmbedding { vectors, replicated })
    }

    fn decoder_input(content: &ContentEmbedding, speaker: &SpeakerEmbedding) -> Result<SeqBatch> {
        let q = content.decoder_view();
        let s = &speaker.replicated;
        if q.batch != s.batch || q.len != s.len {
            return Err(Error::Shape(format!(
                "content is {}×{} frames, speaker is replicated to {}×{}",
                q.batch, q.len, s.batch, s.len
            )));
        }
        let z = concatenate(Axis(1), &[q.data.view(), s.data.view()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(q.with_data(z))
    }

    pub fn decode(&self, content: &ContentEmbedding, speaker: &SpeakerEmbedding) -> Result<SeqBatch> {
        let z = Self::decoder_input(content, speaker)?;
        Ok(self.decoder.infer(&z))
    }

    /// Inference-mode pass with the content path on `x_content` and the
    /// speaker path on `x_speaker`.
    pub fn forward(&self, x_content: &SeqBatch, x_speaker: &SeqBatch) -> Result<ForwardResult> {
        if (x_content.batch, x_content.len) != (x_speaker.batch, x_speaker.len) {
            return Err(Error::Shape("content and speaker inputs differ in length".into()));
        }
        let (encoded, content) = self.encode_content(x_content)?;
        let speaker = self.encode_speaker(x_speaker, x_content.len)?;
        let x_hat = self.decode(&content, &speaker)?;
        let context = self.content.cpc.context.infer(content.decoder_view());
        Ok(ForwardResult {
            x_hat,
            encoded,
            content,
            speaker,
            context,
        })
    }

    /// Training-mode forward and backward for one batch. The reconstruction
    /// target is `x_speaker`. Gradients are accumulated into the parameters
    /// (call `zero_grad` first) unless a loss term is non-finite, in which
    /// case the bundle is returned untouched by backward.
    pub fn train_pass(
        &mut self,
        x_content: &SeqBatch,
        x_speaker: &SeqBatch,
        weights: &LossWeights,
        rng: &mut impl Rng,
    ) -> Result<LossBundle> {
        self.train_pass_tapped(x_content, x_speaker, weights, rng, None)
    }

    /// [`NoiseVc::train_pass`] that also reports the loss gradient at the
    /// decoder-facing quantized view and at the encoder output `E`.
    pub fn train_pass_tapped(
        &mut self,
        x_content: &SeqBatch,
        x_speaker: &SeqBatch,
        weights: &LossWeights,
        rng: &mut impl Rng,
        taps: Option<&mut GradientTaps>,
    ) -> Result<LossBundle> {
        check_mel_width(x_content, "content")?;
        check_mel_width(x_speaker, "speaker")?;
        if (x_content.batch, x_content.len) != (x_speaker.batch, x_speaker.len) {
            return Err(Error::Shape("content and speaker inputs differ in length".into()));
        }
        let (len, d) = (x_content.len, self.config.content_dim);

        let (e_pre, content_cache) = self.content.convs.forward(x_content);
        let (e, in_cache) = instance_norm(&e_pre)?;
        let q = quantize(&e, &self.content.codebook)?;

        let (s_frames, speaker_cache) = self.speaker.convs.forward(x_speaker);
        let speaker = SpeakerEmbedding {
            replicated: replicate(&time_mean(&s_frames), len),
            vectors: Array2::zeros((0, 0)),
        };
        let z = Self::decoder_input(&q, &speaker)?;
        let (x_hat, decoder_cache) = self.decoder.forward(&z);

        let (vq, grads) = vq_loss(
            &x_speaker.data,
            &x_hat.data,
            &e.data,
            &q,
            &self.content.codebook,
            weights.commitment,
        )?;
        let cpc = if weights.cpc != 0.0 {
            Some(self.content.cpc.forward(q.decoder_view(), rng)?)
        } else {
            None
        };
        let bundle = LossBundle::new(
            weights.reconstruction * vq.reconstruction,
            weights.codebook * vq.codebook_term,
            vq.commitment_term,
            cpc.as_ref().map_or(0.0, |(l, _)| weights.cpc * l),
        );
        if bundle.non_finite_term().is_some() {
            return Ok(bundle);
        }

        let d_x_hat = grads.reconstruction_wrt_x_hat * weights.reconstruction as f32;
        let dz = self.decoder.backward(decoder_cache, &d_x_hat);
        let d_q_view = dz.slice(s![.., ..d]).to_owned();
        let d_rep = dz.slice(s![.., d..]);
        let mut d_vectors = Array2::<f32>::zeros((x_speaker.batch, self.config.speaker_dim));
        for b in 0..x_speaker.batch {
            d_vectors
                .row_mut(b)
                .assign(&d_rep.slice(s![b * len..(b + 1) * len, ..]).sum_axis(Axis(0)));
        }
        self.speaker
            .convs
            .backward(speaker_cache, &time_mean_backward(&d_vectors, len));

        let mut d_view = d_q_view;
        if let Some((_, cache)) = cpc {
            d_view += &self.content.cpc.backward(cache, weights.cpc);
        }
        let mut d_e = straight_through_backward(&d_view);
        d_e += &(grads.commitment_wrt_e + grads.codebook_wrt_e * weights.codebook as f32);
        let codes = &mut self.content.codebook.codes.grad;
        *codes += &(grads.codebook_wrt_codes * weights.codebook as f32 + grads.commitment_wrt_codes);

        if let Some(t) = taps {
            t.quantized_view = d_view;
            t.encoded = d_e.clone();
        }
        let d_e_pre = instance_norm_backward(&in_cache, &d_e);
        self.content.convs.backward(content_cache, &d_e_pre);
        Ok(bundle)
    }
}

impl Parameterized for NoiseVc {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        let c = join(prefix, "content");
        self.content.convs.visit(&c, f);
        self.content.codebook.visit(&join(&c, "codebook"), f);
        self.content.cpc.visit(&join(&c, "cpc"), f);
        self.speaker.convs.visit(&join(prefix, "speaker"), f);
        let dec = join(prefix, "decoder");
        self.decoder.convs.visit(&join(&dec, "conv"), f);
        self.decoder.norms.visit(&join(&dec, "norm"), f);
        self.decoder.lstm.visit(&join(&dec, "lstm"), f);
        self.decoder.out.visit(&join(&dec, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        let c = join(prefix, "content");
        self.content.convs.visit_mut(&c, f);
        self.content.codebook.visit_mut(&join(&c, "codebook"), f);
        self.content.cpc.visit_mut(&join(&c, "cpc"), f);
        self.speaker.convs.visit_mut(&join(prefix, "speaker"), f);
        let dec = join(prefix, "decoder");
        self.decoder.convs.visit_mut(&join(&dec, "conv"), f);
        self.decoder.norms.visit_mut(&join(&dec, "norm"), f);
        self.decoder.lstm.visit_mut(&join(&dec, "lstm"), f);
        self.decoder.out.visit_mut(&join(&dec, "out"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            kernel: 3,
            content_channels: vec![12, 12],
            content_dim: 6,
            codebook_size: 16,
            speaker_channels: vec![8],
            speaker_dim: 5,
            decoder_width: 10,
            decoder_layers: 3,
            decoder_hidden: 7,
            context_dim: 6,
            horizon: 3,
            n_negatives: 4,
            negatives_from: NegativeSource::Batch,
        }
    }

    fn random_mels(batch: usize, len: usize, seed: u64) -> SeqBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SeqBatch::new(
            Array2::from_shape_fn((batch * len, N_MELS), |_| rng.random_range(-2.0..2.0)),
            batch,
            len,
        )
    }

    #[test]
    fn lengths_are_preserved_end_to_end() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = NoiseVc::new(ModelConfig::desk(), &mut rng).unwrap();
        let x = random_mels(1, 100, 1);
        let out = net.forward(&x, &x).unwrap();
        assert_eq!(out.content.len(), 100);
        assert_eq!(out.encoded.len, 100);
        assert_eq!(out.x_hat.len, 100);
        assert_eq!(out.x_hat.channels(), N_MELS);
        assert!(out.content.indices.iter().all(|&i| i < 256));
        let rows = &out.speaker.replicated.data;
        assert!(rows.rows().into_iter().all(|r| r == out.speaker.vectors.row(0)));
    }

    #[test]
    fn paper_preset_decoder_takes_1024_wide_input() {
        let cfg = ModelConfig::paper();
        assert_eq!(cfg.decoder_input(), 1024);
        let net = NoiseVc::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(net.decoder.input_width(), 1024);
        let x = random_mels(1, 8, 2);
        let (_, q) = net.encode_content(&x).unwrap();
        assert!(q.indices.iter().all(|&i| i < 2048));
    }

    #[test]
    fn single_frame_content_is_degenerate() {
        let net = NoiseVc::new(tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(
            net.encode_content(&random_mels(1, 1, 0)),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn zero_inputs_decode_to_finite_values() {
        let net = NoiseVc::new(ModelConfig::desk(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let content = ContentEmbedding {
            quantized: SeqBatch::single(Array2::zeros((20, 64))),
            indices: vec![0; 20],
        };
        let speaker = SpeakerEmbedding {
            vectors: Array2::zeros((1, 128)),
            replicated: SeqBatch::single(Array2::zeros((20, 128))),
        };
        let y = net.decode(&content, &speaker).unwrap();
        assert!(y.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn decoder_is_speaker_sensitive_and_checks_lengths() {
        let net = NoiseVc::new(tiny(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x = random_mels(1, 30, 4);
        let (_, q) = net.encode_content(&x).unwrap();
        let s1 = net.encode_speaker(&random_mels(1, 30, 5), 30).unwrap();
        let s2 = net.encode_speaker(&random_mels(1, 25, 6), 30).unwrap();
        let y1 = net.decode(&q, &s1).unwrap();
        let y2 = net.decode(&q, &s2).unwrap();
        let diff = crate::blocks::l1_distance(&y1.data, &y2.data);
        assert!(diff > 0.0);
        let short = net.encode_speaker(&x, 29).unwrap();
        assert!(matches!(net.decode(&q, &short), Err(Error::Shape(_))));
    }

    #[test]
    fn inference_is_deterministic() {
        let net = NoiseVc::new(tiny(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x = random_mels(2, 20, 7);
        let a = net.forward(&x, &x).unwrap();
        let b = net.forward(&x, &x).unwrap();
        assert_eq!(a.x_hat, b.x_hat);
        assert_eq!(a.content.indices, b.content.indices);
    }

    #[test]
    fn duplicated_utterance_keeps_its_speaker_vector() {
        let net = NoiseVc::new(ModelConfig::desk(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let x = random_mels(1, 60, 9);
        let doubled = SeqBatch::single(concatenate(Axis(0), &[x.data.view(), x.data.view()]).unwrap());
        let once = net.speaker.convs.infer(&x);
        let twice = net.speaker.convs.infer(&doubled);
        let r = net.speaker.convs.receptive_radius();
        let interior = |y: &SeqBatch, ranges: &[std::ops::Range<usize>]| {
            let mut sum = Array2::<f64>::zeros((1, y.channels()));
            let mut n = 0;
            for range in ranges {
                for t in range.clone() {
                    sum.row_mut(0).zip_mut_with(&y.data.row(t), |a, &b| *a += b as f64);
                    n += 1;
                }
            }
            sum / n as f64
        };
        let a = interior(&once, &[r..60 - r]);
        let b = interior(&twice, &[r..60 - r, 60 + r..120 - r]);
        let rel = (&a - &b).mapv(f64::abs).sum() / a.mapv(f64::abs).sum();
        assert!(rel < 1e-5, "{rel}");
    }

    fn group_grad_norms(net: &NoiseVc) -> Vec<(String, f64)> {
        let groups = [
            "content.conv",
            "content.codebook",
            "content.cpc.predictors",
            "content.cpc.context",
            "speaker.conv",
            "decoder",
        ];
        groups
            .iter()
            .map(|g| {
                let mut total = 0.0;
                net.visit("", &mut |name, p| {
                    if name.starts_with(g) {
                        total += p.grad.iter().map(|&v| (v as f64).abs()).sum::<f64>();
                    }
                });
                (g.to_string(), total)
            })
            .collect()
    }

    #[test]
    fn every_parameter_group_receives_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut net = NoiseVc::new(ModelConfig::desk(), &mut rng).unwrap();
        let x = random_mels(2, 40, 11);
        net.zero_grad();
        let loss = net.train_pass(&x, &x, &LossWeights::default(), &mut rng).unwrap();
        assert!((loss.cpc - 9f64.ln()).abs() < 0.5, "{}", loss.cpc);
        for (g, n) in group_grad_norms(&net) {
            assert!(n > 0.0, "{g} has no gradient");
        }
    }

    #[test]
    fn disabled_terms_leave_their_parameters_without_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut net = NoiseVc::new(tiny(), &mut rng).unwrap();
        let x = random_mels(2, 16, 13);
        let only_commit = LossWeights {
            reconstruction: 0.0,
            codebook: 0.0,
            commitment: 0.25,
            cpc: 0.0,
        };
        net.zero_grad();
        net.train_pass(&x, &x, &only_commit, &mut rng).unwrap();
        assert!(net.content.codebook.codes.grad.iter().all(|&v| v == 0.0));
        let only_codebook = LossWeights {
            commitment: 0.0,
            codebook: 1.0,
            ..only_commit
        };
        net.zero_grad();
        net.train_pass(&x, &x, &only_codebook, &mut rng).unwrap();
        net.content.convs.visit("", &mut |name, p| {
            assert!(p.grad.iter().all(|&v| v == 0.0), "{name}");
        });
        assert!(net.content.codebook.codes.grad.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn decoder_and_speaker_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let base = NoiseVc::new(tiny(), &mut rng).unwrap();
        let x = random_mels(2, 12, 15);
        let speaker_in = random_mels(2, 12, 16);
        let weights = LossWeights {
            cpc: 0.0,
            ..LossWeights::default()
        };
        let mut net = base.clone();
        net.zero_grad();
        net.train_pass(&x, &speaker_in, &weights, &mut rng).unwrap();

        let total = |m: &NoiseVc| {
            let mut m = m.clone();
            let mut r = ChaCha8Rng::seed_from_u64(0);
            m.train_pass(&x, &speaker_in, &weights, &mut r).unwrap().total
        };
        for target in ["decoder.conv.1.weight", "decoder.lstm.w_hh", "decoder.out.weight", "speaker.conv.0.weight"] {
            let mut analytic = None;
            net.visit("", &mut |name, p| {
                if name == target {
                    analytic = Some(p.grad.clone());
                }
            });
            let analytic = analytic.unwrap();
            let mut value = None;
            base.visit("", &mut |name, p| {
                if name == target {
                    value = Some(p.value.clone());
                }
            });
            let mut w = value.unwrap();
            let (rows, cols) = w.dim();
            let err = gradcheck::check(&mut w, &analytic, &gradcheck::coords(rows, cols, 6), 1e-3, |w| {
                let mut m = base.clone();
                m.visit_mut("", &mut |name, p| {
                    if name == target {
                        p.value.assign(w);
                    }
                });
                total(&m)
            });
            assert!(err < 1e-2, "{target}: {err}");
        }
    }
}
