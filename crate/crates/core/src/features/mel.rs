use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::audio::AudioClip;
use crate::error::{Error, Result};
use crate::tensor_file;

pub const SAMPLE_RATE: u32 = 22_050;
pub const N_MELS: usize = 80;
pub const WINDOW: usize = 1024;
/// 128 samples, 5.805 ms at 22050 Hz.
pub const HOP: usize = 128;
pub const N_FREQS: usize = WINDOW / 2 + 1;
/// Magnitudes are floored here before the natural log.
pub const MAG_FLOOR: f32 = 1e-5;

pub fn log_floor() -> f32 {
    MAG_FLOOR.ln()
}

/// `[n_mels × T]` natural-log mel magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Array2<f32>,
    pub hop_samples: usize,
    pub window_samples: usize,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        if values.nrows() != N_MELS {
            return Err(Error::Shape(format!(
                "mel spectrogram needs {N_MELS} rows, got {}",
                values.nrows()
            )));
        }
        if values.ncols() == 0 {
            return Err(Error::Shape("mel spectrogram has no frames".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("mel spectrogram has non-finite values".into()));
        }
        Ok(MelSpectrogram {
            values,
            hop_samples: HOP,
            window_samples: WINDOW,
            sample_rate: SAMPLE_RATE,
        })
    }

    /// Builds from time-major `[T × n_mels]` frames.
    pub fn from_frames(frames: ArrayView2<'_, f32>) -> Result<Self> {
        Self::new(frames.t().as_standard_layout().into_owned())
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }

    /// Time-major `[T × n_mels]` copy, the layout the network consumes.
    pub fn frames(&self) -> Array2<f32> {
        self.values.t().as_standard_layout().into_owned()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        tensor_file::write_matrix(path, &self.values)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let values = tensor_file::read_matrix(path)?;
        Self::new(values).map_err(|e| Error::ingest(path, e.to_string()))
    }
}

/// Number of frames produced for `n_samples` samples, without centering.
pub fn frame_count(n_samples: usize) -> usize {
    if n_samples < WINDOW {
        0
    } else {
        (n_samples - WINDOW) / HOP + 1
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `[n_mels × n_freqs]` triangular filters spaced evenly on the mel scale
/// from 0 Hz to Nyquist, each scaled to unit area (`2 / bandwidth`).
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize) -> Array2<f32> {
    let n_freqs = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    Array2::from_shape_fn((n_mels, n_freqs), |(m, k)| {
        let f = k as f64 * bin_hz;
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let rise = (f - lo) / (mid - lo);
        let fall = (hi - f) / (hi - mid);
        let tri = rise.min(fall).max(0.0);
        (tri * 2.0 / (hi - lo)) as f32
    })
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()) as f32)
        .collect()
}

/// Reusable STFT + filterbank state.
pub struct MelExtractor {
    fft: Arc<dyn Fft<f32>>,
    window: Vec<f32>,
    filters: Array2<f32>,
}

impl Default for MelExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl MelExtractor {
    pub fn new() -> Self {
        MelExtractor {
            fft: FftPlanner::new().plan_fft_forward(WINDOW),
            window: hann(WINDOW),
            filters: mel_filterbank(SAMPLE_RATE, WINDOW, N_MELS),
        }
    }

    pub fn filters(&self) -> &Array2<f32> {
        &self.filters
    }

    /// `[n_freqs × T]` STFT magnitudes.
    pub fn magnitudes(&self, samples: &[f32]) -> Array2<f32> {
        let n = frame_count(samples.len());
        let mut mags = Array2::<f32>::zeros((N_FREQS, n));
        let mut buf = vec![Complex::new(0.0f32, 0.0); WINDOW];
        for t in 0..n {
            let frame = &samples[t * HOP..t * HOP + WINDOW];
            for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = Complex::new(x * w, 0.0);
            }
            self.fft.process(&mut buf);
            for k in 0..N_FREQS {
                mags[[k, t]] = buf[k].norm();
            }
        }
        mags
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<MelSpectrogram> {
        if clip.sample_rate != SAMPLE_RATE {
            return Err(Error::Shape(format!(
                "mel extraction expects {SAMPLE_RATE} Hz, got {}",
                clip.sample_rate
            )));
        }
        if clip.samples.len() < WINDOW {
            return Err(Error::TooShort {
                needed: WINDOW,
                got: clip.samples.len(),
            });
        }
        let mel = self.filters.dot(&self.magnitudes(&clip.samples));
        MelSpectrogram::new(mel.mapv(|v| v.max(MAG_FLOOR).ln()))
    }
}

pub fn mel_spectrogram(clip: &AudioClip) -> Result<MelSpectrogram> {
    MelExtractor::new().extract(clip)
}
