//! Synthetic log-mel corpus with known content and speaker factors.
//!
//! Every frame is `base + offset_s + gain_s ⊙ template[symbol] + pitch_s(t)`:
//! symbol templates carry content in the upper channels, a per-speaker
//! per-channel affine transform carries time-invariant timbre, and a small
//! moving bump in the lowest channels plays the role of pitch. Symbols follow
//! a sparse Markov chain so that the future is partly predictable from the
//! past.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::manifest::{split_files, CorpusFile, DatasetManifest, SplitOptions, MANIFEST_FILE, MEL_EXT};
use crate::features::mel::N_MELS;
use crate::features::MelSpectrogram;

/// Channels `0..PITCH_BAND` hold the pitch bump; templates live above it.
pub const PITCH_BAND: usize = 20;
pub const LABELS_EXT: &str = "labels";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_speakers: usize,
    pub n_content_symbols: usize,
    /// Inclusive range.
    pub utterance_len_frames: (usize, usize),
    /// Inclusive range.
    pub symbol_dur_frames: (usize, usize),
    pub seed: u64,
    /// Allowed successors of each symbol in the Markov chain.
    pub successors: usize,
    /// Height of the pitch bump in log-mel units.
    pub pitch_height: f32,
    /// Peak deviation of the pitch contour around the speaker mean, in channels.
    pub pitch_swing: f32,
    /// Amplitude of the smooth per-speaker channel offset.
    pub timbre_offset: f32,
    /// Amplitude of the smooth per-speaker log gain on templates.
    pub timbre_gain: f32,
    /// Std of i.i.d. Gaussian texture added to every element.
    pub render_noise: f32,
    /// Minimum pairwise L2 distance between symbol templates.
    pub min_template_distance: f32,
    pub unseen_fraction: f64,
    /// Corpus size used when no explicit count is given.
    pub utterances_per_speaker: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_speakers: 10,
            n_content_symbols: 16,
            utterance_len_frames: (160, 320),
            symbol_dur_frames: (6, 14),
            seed: 0,
            successors: 3,
            pitch_height: 0.3,
            pitch_swing: 2.0,
            timbre_offset: 0.4,
            timbre_gain: 0.15,
            render_noise: 0.03,
            min_template_distance: 3.0,
            unseen_fraction: 0.2,
            utterances_per_speaker: 40,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Err(Error::config(format!("synth.{key}"), reason));
        if self.n_speakers < 2 {
            return bad("n_speakers", "need at least 2 speakers");
        }
        if self.n_content_symbols < 1 {
            return bad("n_content_symbols", "need at least 1 symbol");
        }
        for (key, (lo, hi)) in [
            ("utterance_len_frames", self.utterance_len_frames),
            ("symbol_dur_frames", self.symbol_dur_frames),
        ] {
            if lo == 0 || lo > hi {
                return bad(key, "range must be positive and non-empty");
            }
        }
        if self.utterances_per_speaker == 0 {
            return bad("utterances_per_speaker", "must be positive");
        }
        if self.successors == 0 {
            return bad("successors", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.unseen_fraction) {
            return bad("unseen_fraction", "must lie in [0, 1]");
        }
        for (key, v) in [
            ("pitch_height", self.pitch_height),
            ("pitch_swing", self.pitch_swing),
            ("timbre_offset", self.timbre_offset),
            ("timbre_gain", self.timbre_gain),
            ("render_noise", self.render_noise),
            ("min_template_distance", self.min_template_distance),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(key, "must be finite and non-negative");
            }
        }
        Ok(())
    }

    pub fn n_unseen(&self) -> usize {
        (self.n_speakers as f64 * self.unseen_fraction).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub mel: MelSpectrogram,
    pub content_labels: Vec<usize>,
    pub speaker_id: usize,
    /// Center of the pitch bump per frame, in channels.
    pub pitch_track: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct SpeakerVoice {
    pub offset: Vec<f32>,
    pub gain: Vec<f32>,
    pub pitch_mean: f32,
}

/// Everything that is fixed once per spec: templates, the symbol chain and
/// the speakers.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub spec: SyntheticSpec,
    pub base: Vec<f32>,
    pub templates: Array2<f32>,
    pub successors: Vec<Vec<usize>>,
    pub voices: Vec<SpeakerVoice>,
}

fn smooth_curve(rng: &mut impl Rng, amplitude: f32) -> Vec<f32> {
    let terms: Vec<(f32, f32)> = (1..=3)
        .map(|_| {
            (
                rng.random_range(-amplitude..=amplitude),
                rng.random_range(0.0..std::f32::consts::TAU),
            )
        })
        .collect();
    (0..N_MELS)
        .map(|c| {
            terms
                .iter()
                .enumerate()
                .map(|(j, &(a, phase))| {
                    a * ((j + 1) as f32 * std::f32::consts::PI * c as f32 / N_MELS as f32 + phase).cos()
                })
                .sum()
        })
        .collect()
}

fn draw_template(rng: &mut impl Rng) -> Vec<f32> {
    let mut t = vec![0.0f32; N_MELS];
    for _ in 0..3 {
        let center = rng.random_range(PITCH_BAND as f32 + 2.0..N_MELS as f32 - 1.0);
        let width = rng.random_range(1.5f32..4.0);
        let height = rng.random_range(1.0f32..2.5);
        for (c, v) in t.iter_mut().enumerate().skip(PITCH_BAND) {
            *v += height * (-((c as f32 - center).powi(2)) / (2.0 * width * width)).exp();
        }
    }
    t
}

fn distance(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f32>().sqrt()
}

impl SyntheticWorld {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(u64::MAX);

        let mut templates: Vec<Vec<f32>> = Vec::new();
        let mut attempts = 0;
        while templates.len() < spec.n_content_symbols {
            let t = draw_template(&mut rng);
            attempts += 1;
            if templates.iter().all(|o| distance(o, &t) >= spec.min_template_distance) {
                templates.push(t);
            } else if attempts > 10_000 {
                return Err(Error::config(
                    "synth.min_template_distance",
                    "cannot draw enough separated templates",
                ));
            }
        }
        let templates = Array2::from_shape_fn((spec.n_content_symbols, N_MELS), |(k, c)| templates[k][c]);

        let n = spec.n_content_symbols;
        let successors = (0..n)
            .map(|k| {
                if n == 1 {
                    return vec![0];
                }
                let mut others: Vec<usize> = (0..n).filter(|&j| j != k).collect();
                others.shuffle(&mut rng);
                others.truncate(spec.successors.min(n - 1));
                others
            })
            .collect();

        let base = (0..N_MELS)
            .map(|c| -5.0 + 1.5 * (1.0 - c as f32 / N_MELS as f32))
            .collect();
        let lo = 3.0;
        let hi = PITCH_BAND as f32 - 4.0;
        let voices = (0..spec.n_speakers)
            .map(|_| SpeakerVoice {
                offset: smooth_curve(&mut rng, spec.timbre_offset),
                gain: smooth_curve(&mut rng, spec.timbre_gain).into_iter().map(f32::exp).collect(),
                pitch_mean: rng.random_range(lo..hi),
            })
            .collect();
        Ok(SyntheticWorld {
            spec: spec.clone(),
            base,
            templates,
            successors,
            voices,
        })
    }

    /// Per-frame symbol ids. Consumes the rng before any speaker-specific
    /// draw, so equal rng states give equal labels for every speaker.
    pub fn draw_labels(&self, rng: &mut impl Rng) -> Vec<usize> {
        let (lo, hi) = self.spec.utterance_len_frames;
        let len = rng.random_range(lo..=hi);
        let (dlo, dhi) = self.spec.symbol_dur_frames;
        let mut labels = Vec::with_capacity(len + dhi);
        let mut symbol = rng.random_range(0..self.spec.n_content_symbols);
        while labels.len() < len {
            let dur = rng.random_range(dlo..=dhi);
            labels.extend(std::iter::repeat_n(symbol, dur));
            symbol = *self.successors[symbol].choose(rng).unwrap();
        }
        labels.truncate(len);
        labels
    }

    pub fn render(&self, speaker_id: usize, rng: &mut impl Rng) -> Result<SyntheticSample> {
        let voice = self.voices.get(speaker_id).ok_or_else(|| {
            Error::config(
                "speaker_id",
                format!("{speaker_id} out of range for {} speakers", self.spec.n_speakers),
            )
        })?;
        let labels = self.draw_labels(rng);
        let len = labels.len();
        let period = rng.random_range(40.0f32..100.0);
        let phase = rng.random_range(0.0..std::f32::consts::TAU);
        let pitch_track: Vec<f32> = (0..len)
            .map(|t| {
                voice.pitch_mean
                    + self.spec.pitch_swing * (std::f32::consts::TAU * t as f32 / period + phase).sin()
            })
            .collect();
        let noise = Normal::new(0.0f32, self.spec.render_noise).expect("validated std");
        let mut values = Array2::<f32>::zeros((N_MELS, len));
        for t in 0..len {
            let template = self.templates.row(labels[t]);
            for c in 0..N_MELS {
                let mut v = self.base[c] + voice.offset[c] + voice.gain[c] * template[c];
                if c < PITCH_BAND {
                    let d = c as f32 - pitch_track[t];
                    v += self.spec.pitch_height * (-d * d / 2.0).exp();
                }
                values[[c, t]] = v + noise.sample(rng);
            }
        }
        Ok(SyntheticSample {
            mel: MelSpectrogram::new(values)?,
            content_labels: labels,
            speaker_id,
            pitch_track,
        })
    }

    fn utterance_rng(&self, speaker: usize, utterance: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(((speaker as u64) << 32) | utterance as u64);
        rng
    }

    pub fn render_utterance(&self, speaker: usize, utterance: usize) -> Result<SyntheticSample> {
        self.render(speaker, &mut self.utterance_rng(speaker, utterance))
    }
}

pub fn render_sample(spec: &SyntheticSpec, speaker_id: usize, rng: &mut impl Rng) -> Result<SyntheticSample> {
    SyntheticWorld::new(spec)?.render(speaker_id, rng)
}

pub fn speaker_name(id: usize) -> String {
    format!("spk{id:03}")
}

/// Inverse of [`speaker_name`].
pub fn speaker_index(name: &str) -> Option<usize> {
    name.strip_prefix("spk")?.parse().ok()
}

pub fn labels_path(mel_path: &Path) -> PathBuf {
    mel_path.with_extension(LABELS_EXT)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut line = labels.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    line.push('\n');
    crate::tensor_file::write_atomic(path, line.as_bytes())
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.split_whitespace()
        .map(|tok| {
            tok.parse()
                .map_err(|_| Error::ingest(path, format!("bad label `{tok}`")))
        })
        .collect()
}

/// Writes `<out>/<speaker>/<utterance>.nvcm` + `.labels` for every utterance
/// and a manifest at `<out>/manifest.jsonl`.
pub fn generate_corpus_with(
    spec: &SyntheticSpec,
    utterances_per_speaker: usize,
    out_dir: &Path,
    test_per_seen: usize,
) -> Result<DatasetManifest> {
    let world = SyntheticWorld::new(spec)?;
    let mut files = Vec::new();
    for s in 0..spec.n_speakers {
        let name = speaker_name(s);
        let dir = out_dir.join(&name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for u in 0..utterances_per_speaker {
            let sample = world.render_utterance(s, u)?;
            let utt = format!("{name}_u{u:03}");
            let mel_path = dir.join(&utt).with_extension(MEL_EXT);
            sample.mel.write(&mel_path)?;
            write_labels(&labels_path(&mel_path), &sample.content_labels)?;
            files.push(CorpusFile {
                speaker_id: name.clone(),
                utterance_id: utt.clone(),
                rel_path: PathBuf::from(&name).join(mel_path.file_name().unwrap()),
                n_frames: sample.mel.n_frames(),
            });
        }
    }
    let opts = SplitOptions {
        n_unseen: spec.n_unseen(),
        test_per_seen,
        seed: spec.seed,
    };
    let manifest = split_files(files, out_dir, &opts)?;
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn generate_corpus(spec: &SyntheticSpec, utterances_per_speaker: usize, out_dir: &Path) -> Result<DatasetManifest> {
    generate_corpus_with(spec, utterances_per_speaker, out_dir, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            utterance_len_frames: (40, 60),
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn single_symbol_spec_has_constant_labels() {
        let spec = SyntheticSpec {
            n_content_symbols: 1,
            ..small()
        };
        let s = render_sample(&spec, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(s.content_labels.iter().all(|&l| l == 0));
        assert_eq!(s.content_labels.len(), s.mel.n_frames());
    }

    #[test]
    fn speakers_share_labels_but_not_mels() {
        let world = SyntheticWorld::new(&small()).unwrap();
        let rng = ChaCha8Rng::seed_from_u64(5);
        let a = world.render(0, &mut rng.clone()).unwrap();
        let b = world.render(1, &mut rng.clone()).unwrap();
        assert_eq!(a.content_labels, b.content_labels);
        assert_ne!(a.mel, b.mel);
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = SyntheticSpec { seed: 7, ..small() };
        let a = render_sample(&spec, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = render_sample(&spec, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn templates_are_separated_and_chain_has_no_self_loops() {
        let world = SyntheticWorld::new(&SyntheticSpec::default()).unwrap();
        let t = &world.templates;
        for i in 0..t.nrows() {
            for j in 0..i {
                let d = distance(t.row(i).as_slice().unwrap(), t.row(j).as_slice().unwrap());
                assert!(d >= 3.0);
            }
            assert!(!world.successors[i].contains(&i));
            assert_eq!(world.successors[i].len(), 3);
        }
    }

    #[test]
    fn labels_and_lengths_respect_the_spec() {
        let spec = small();
        let world = SyntheticWorld::new(&spec).unwrap();
        for u in 0..10 {
            let s = world.render_utterance(3, u).unwrap();
            let n = s.content_labels.len();
            assert!((40..=60).contains(&n));
            assert!(s.content_labels.iter().all(|&l| l < spec.n_content_symbols));
            assert_eq!(s.pitch_track.len(), n);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for spec in [
            SyntheticSpec { n_speakers: 1, ..small() },
            SyntheticSpec { symbol_dur_frames: (5, 4), ..small() },
            SyntheticSpec { utterance_len_frames: (0, 4), ..small() },
        ] {
            assert!(matches!(SyntheticWorld::new(&spec), Err(Error::Config { .. })));
        }
        let world = SyntheticWorld::new(&small()).unwrap();
        assert!(world.render_utterance(10, 0).is_err());
    }

    #[test]
    fn corpus_layout_and_split() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small();
        let m = generate_corpus(&spec, 4, dir.path()).unwrap();
        assert_eq!(m.entries.len(), 40);
        assert_eq!(m.seen_speakers().len(), 8);
        assert_eq!(m.unseen_speakers().len(), 2);
        m.validate().unwrap();
        let back = DatasetManifest::read(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back.entries, m.entries);
        for e in &m.entries {
            let labels = read_labels(&labels_path(&m.resolve(e))).unwrap();
            assert_eq!(labels.len(), e.n_frames);
        }
    }

    #[test]
    fn one_utterance_per_speaker() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_corpus(&small(), 1, dir.path()).unwrap();
        assert_eq!(m.entries.len(), 10);
    }

    #[test]
    fn corpus_generation_is_reproducible() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = SyntheticSpec { seed: 3, ..small() };
        generate_corpus(&spec, 2, a.path()).unwrap();
        generate_corpus(&spec, 2, b.path()).unwrap();
        for rel in ["manifest.jsonl", "spk004/spk004_u001.nvcm", "spk004/spk004_u001.labels"] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
        }
    }

    #[test]
    fn speaker_names_roundtrip() {
        assert_eq!(speaker_index(&speaker_name(42)), Some(42));
        assert_eq!(speaker_index("p225"), None);
    }
}
