//! Voice conversion by cross-wiring the two encoders, plus Griffin-Lim
//! inversion of log-mel spectrograms for listening checks.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::features::mel::{hann, log_floor, mel_filterbank, HOP, N_FREQS, SAMPLE_RATE, WINDOW};
use crate::features::{load_and_resample, AudioClip, MelSpectrogram, MelExtractor};
use crate::model::NoiseVc;
use crate::nn::SeqBatch;

pub const DEFAULT_GRIFFIN_LIM_ITERATIONS: usize = 60;
/// Multiplicative updates used to map mel energies back to linear bins.
const NNLS_ITERATIONS: usize = 100;

/// Which request input a model path consumed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Source,
    Target(usize),
}

/// Record of which inputs reached the content and speaker paths.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PathTrace {
    pub content: Vec<Role>,
    pub speaker: Vec<Role>,
}

fn check_length(mel: &MelSpectrogram, what: &str) -> Result<()> {
    if mel.n_frames() < 2 {
        return Err(Error::DegenerateInput(format!(
            "{what} mel has {} frame(s), need at least 2",
            mel.n_frames()
        )));
    }
    Ok(())
}

/// Content of `source` spoken with the voice of `target`.
pub fn convert(net: &NoiseVc, source: &MelSpectrogram, target: &MelSpectrogram) -> Result<MelSpectrogram> {
    convert_traced(net, source, &[target], &mut PathTrace::default())
}

/// Like [`convert`] with the speaker vector averaged over several target
/// utterances.
pub fn convert_averaged(net: &NoiseVc, source: &MelSpectrogram, targets: &[&MelSpectrogram]) -> Result<MelSpectrogram> {
    convert_traced(net, source, targets, &mut PathTrace::default())
}

pub fn convert_traced(
    net: &NoiseVc,
    source: &MelSpectrogram,
    targets: &[&MelSpectrogram],
    trace: &mut PathTrace,
) -> Result<MelSpectrogram> {
    check_length(source, "source")?;
    if targets.is_empty() {
        return Err(Error::Shape("conversion needs at least one target utterance".into()));
    }
    for t in targets {
        check_length(t, "target")?;
    }
    let len = source.n_frames();
    trace.content.push(Role::Source);
    let (_, content) = net.encode_content(&SeqBatch::single(source.frames()))?;
    let mut speaker = None;
    let mut sum: Option<Array2<f32>> = None;
    for (i, t) in targets.iter().enumerate() {
        trace.speaker.push(Role::Target(i));
        let s = net.encode_speaker(&SeqBatch::single(t.frames()), len)?;
        sum = Some(match sum {
            Some(acc) => acc + &s.vectors,
            None => s.vectors.clone(),
        });
        speaker = Some(s);
    }
    let mut speaker = speaker.expect("at least one target");
    if targets.len() > 1 {
        let mean = sum.expect("at least one target") / targets.len() as f32;
        speaker.replicated = crate::nn::replicate(&mean, len);
        speaker.vectors = mean;
    }
    let out = net.decode(&content, &speaker)?;
    MelSpectrogram::from_frames(out.item(0))
}

/// Reads a `.wav` (resampled and converted to a mel) or a stored mel.
pub fn load_mel_input(path: &Path) -> Result<MelSpectrogram> {
    let is_wav = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if is_wav {
        let clip = load_and_resample(path, SAMPLE_RATE)?;
        MelExtractor::new().extract(&clip)
    } else {
        MelSpectrogram::read(path)
    }
}

/// Griffin-Lim phase recovery matched to the feature extractor's STFT.
pub struct GriffinLim {
    forward: Arc<dyn Fft<f32>>,
    inverse: Arc<dyn Fft<f32>>,
    window: Vec<f32>,
    filters: Array2<f32>,
    pub seed: u64,
}

impl Default for GriffinLim {
    fn default() -> Self {
        Self::new()
    }
}

impl GriffinLim {
    pub fn new() -> Self {
        let mut planner = FftPlanner::new();
        GriffinLim {
            forward: planner.plan_fft_forward(WINDOW),
            inverse: planner.plan_fft_inverse(WINDOW),
            window: hann(WINDOW),
            filters: mel_filterbank(SAMPLE_RATE, WINDOW, crate::features::mel::N_MELS),
            seed: 0,
        }
    }

    /// Non-negative `[n_freqs × T]` magnitudes whose mel projection best
    /// matches the mel energies. Floored cells count as silence.
    pub fn linear_magnitudes(&self, mel: &MelSpectrogram) -> Array2<f32> {
        let floor = log_floor() + 1e-4;
        let energy = mel.values.mapv(|v| if v <= floor { 0.0 } else { v.exp() });
        let ft = self.filters.t();
        let numer = ft.dot(&energy);
        let coverage = self.filters.sum_axis(Axis(0)).mapv(|c| if c > 0.0 { 1.0 / c } else { 0.0 });
        let mut s = &numer * &coverage.insert_axis(Axis(1));
        for _ in 0..NNLS_ITERATIONS {
            let denom = ft.dot(&self.filters.dot(&s));
            ndarray::Zip::from(&mut s)
                .and(&numer)
                .and(&denom)
                .for_each(|s, &n, &d| *s = if d > 0.0 { *s * n / d } else { 0.0 });
        }
        s
    }

    fn stft(&self, samples: &[f32], n_frames: usize) -> Vec<Vec<Complex<f32>>> {
        (0..n_frames)
            .map(|t| {
                let mut buf: Vec<Complex<f32>> = samples[t * HOP..t * HOP + WINDOW]
                    .iter()
                    .zip(&self.window)
                    .map(|(&x, &w)| Complex::new(x * w, 0.0))
                    .collect();
                self.forward.process(&mut buf);
                buf.truncate(N_FREQS);
                buf
            })
            .collect()
    }

    /// Weighted overlap-add of the inverse transforms of half spectra.
    fn istft(&self, frames: &[Vec<Complex<f32>>]) -> Vec<f32> {
        let n = (frames.len().saturating_sub(1)) * HOP + WINDOW;
        let mut out = vec![0.0f32; n];
        let mut norm = vec![0.0f32; n];
        let mut buf = vec![Complex::new(0.0f32, 0.0); WINDOW];
        for (t, half) in frames.iter().enumerate() {
            buf[..N_FREQS].copy_from_slice(half);
            for k in N_FREQS..WINDOW {
                buf[k] = half[WINDOW - k].conj();
            }
            self.inverse.process(&mut buf);
            for (i, (b, &w)) in buf.iter().zip(&self.window).enumerate() {
                out[t * HOP + i] += b.re / WINDOW as f32 * w;
                norm[t * HOP + i] += w * w;
            }
        }
        for (o, &z) in out.iter_mut().zip(&norm) {
            if z > 1e-8 {
                *o /= z;
            }
        }
        out
    }

    pub fn invert(&self, mel: &MelSpectrogram, n_iters: usize) -> Result<AudioClip> {
        if n_iters == 0 {
            return Err(Error::config("eval.griffin_lim_iterations", "need at least one iteration"));
        }
        check_length(mel, "inverted")?;
        let mags = self.linear_magnitudes(mel);
        let n_frames = mags.ncols();
        let columns: Vec<Array1<f32>> = mags.axis_iter(Axis(1)).map(|c| c.to_owned()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut spec: Vec<Vec<Complex<f32>>> = columns
            .iter()
            .map(|col| {
                col.iter()
                    .map(|&m| Complex::from_polar(m, rng.random_range(0.0..std::f32::consts::TAU)))
                    .collect()
            })
            .collect();
        let mut samples = self.istft(&spec);
        for _ in 1..n_iters {
            let rebuilt = self.stft(&samples, n_frames);
            for ((frame, col), est) in spec.iter_mut().zip(&columns).zip(&rebuilt) {
                for ((c, &m), e) in frame.iter_mut().zip(col).zip(est) {
                    let r = e.norm();
                    *c = if r > 1e-12 { e * (m / r) } else { Complex::new(m, 0.0) };
                }
            }
            samples = self.istft(&spec);
        }
        Ok(AudioClip {
            samples,
            sample_rate: SAMPLE_RATE,
            speaker_id: String::new(),
            utterance_id: String::new(),
        })
    }
}

/// Waveform whose log-mel approximates `mel`.
pub fn invert_mel(mel: &MelSpectrogram, n_iters: usize) -> Result<AudioClip> {
    GriffinLim::new().invert(mel, n_iters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::l1_distance;
    use crate::model::ModelConfig;
    use crate::synth::{render_sample, SyntheticSpec};

    fn tiny_net() -> NoiseVc {
        let cfg = ModelConfig {
            content_channels: vec![16],
            content_dim: 8,
            codebook_size: 16,
            speaker_channels: vec![16],
            speaker_dim: 8,
            decoder_width: 16,
            decoder_layers: 1,
            decoder_hidden: 16,
            context_dim: 8,
            horizon: 3,
            n_negatives: 4,
            ..ModelConfig::desk()
        };
        NoiseVc::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn sample_mel(speaker: usize, seed: u64) -> MelSpectrogram {
        let spec = SyntheticSpec {
            utterance_len_frames: (40, 60),
            ..SyntheticSpec::default()
        };
        render_sample(&spec, speaker, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().mel
    }

    #[test]
    fn paths_see_only_their_inputs() {
        let net = tiny_net();
        let (src, tgt) = (sample_mel(0, 1), sample_mel(1, 2));
        let mut trace = PathTrace::default();
        let out = convert_traced(&net, &src, &[&tgt], &mut trace).unwrap();
        assert_eq!(trace.content, vec![Role::Source]);
        assert_eq!(trace.speaker, vec![Role::Target(0)]);
        assert_eq!(out.n_frames(), src.n_frames());
        assert_eq!(out, convert(&net, &src, &tgt).unwrap());
    }

    #[test]
    fn conversion_matches_manual_wiring() {
        let net = tiny_net();
        let (src, tgt) = (sample_mel(0, 1), sample_mel(1, 2));
        let (_, q) = net.encode_content(&SeqBatch::single(src.frames())).unwrap();
        let s = net.encode_speaker(&SeqBatch::single(tgt.frames()), src.n_frames()).unwrap();
        let manual = net.decode(&q, &s).unwrap();
        assert_eq!(convert(&net, &src, &tgt).unwrap().frames(), manual.data);
    }

    #[test]
    fn averaging_one_target_twice_changes_nothing() {
        let net = tiny_net();
        let (src, tgt) = (sample_mel(0, 1), sample_mel(1, 2));
        let single = convert(&net, &src, &tgt).unwrap();
        let twice = convert_averaged(&net, &src, &[&tgt, &tgt]).unwrap();
        assert!(l1_distance(&single.values, &twice.values) < 1e-6);
    }

    #[test]
    fn short_inputs_are_rejected() {
        let net = tiny_net();
        let one = MelSpectrogram::new(Array2::zeros((80, 1))).unwrap();
        let ok = sample_mel(0, 1);
        assert!(matches!(convert(&net, &one, &ok), Err(Error::DegenerateInput(_))));
        assert!(matches!(convert(&net, &ok, &one), Err(Error::DegenerateInput(_))));
        assert!(convert_averaged(&net, &ok, &[]).is_err());
    }

    #[test]
    fn silence_inverts_to_silence() {
        let mel = MelSpectrogram::new(Array2::from_elem((80, 20), log_floor())).unwrap();
        let clip = invert_mel(&mel, 10).unwrap();
        assert_eq!(clip.samples.len(), 19 * HOP + WINDOW);
        let peak = clip.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(peak < 1e-3, "{peak}");
    }

    fn tone(freq: f32, seconds: f32) -> AudioClip {
        let n = (SAMPLE_RATE as f32 * seconds) as usize;
        AudioClip {
            samples: (0..n)
                .map(|i| 0.5 * (std::f32::consts::TAU * freq * i as f32 / SAMPLE_RATE as f32).sin())
                .collect(),
            sample_rate: SAMPLE_RATE,
            speaker_id: "t".into(),
            utterance_id: "t".into(),
        }
    }

    #[test]
    fn tone_keeps_its_frequency() {
        let ex = MelExtractor::new();
        let mel = ex.extract(&tone(1000.0, 0.5)).unwrap();
        let clip = invert_mel(&mel, DEFAULT_GRIFFIN_LIM_ITERATIONS).unwrap();
        let spectrum = ex.magnitudes(&clip.samples).sum_axis(Axis(1));
        let peak = spectrum
            .iter()
            .enumerate()
            .fold((0, 0.0f32), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
            .0;
        let expected = (1000.0 * WINDOW as f32 / SAMPLE_RATE as f32).round() as usize;
        assert!(peak.abs_diff(expected) <= 1, "peak bin {peak}, expected {expected}");
    }

    #[test]
    fn more_iterations_do_not_hurt_the_roundtrip() {
        let ex = MelExtractor::new();
        let mel = ex.extract(&tone(440.0, 0.3)).unwrap();
        let synthetic = sample_mel(2, 5);
        for m in [&mel, &synthetic] {
            let l1 = |iters| {
                let clip = invert_mel(m, iters).unwrap();
                let back = ex.extract(&clip).unwrap();
                l1_distance(&m.values, &back.values)
            };
            let (short, long) = (l1(32), l1(DEFAULT_GRIFFIN_LIM_ITERATIONS));
            assert!(long < 2.0 * short, "{long} vs {short}");
            assert!(long.is_finite());
        }
    }
}
