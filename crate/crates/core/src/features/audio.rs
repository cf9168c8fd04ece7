use std::path::Path;

use rubato::{FftFixedInOut, Resampler};

use crate::error::{Error, Result};

/// Mono waveform with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub speaker_id: String,
    pub utterance_id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        AudioClip {
            samples,
            sample_rate,
            speaker_id: String::new(),
            utterance_id: String::new(),
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }
}

/// Decodes a PCM or float WAV file, averaging channels down to mono.
///
/// The speaker id is taken from the parent directory name and the utterance
/// id from the file stem, following the `<speaker>/<utterance>.wav` layout.
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(|e| Error::ingest(path, e.to_string()))?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()
                .map_err(|e| Error::ingest(path, e.to_string()))?
        }
    };
    let samples: Vec<f32> = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    if samples.is_empty() {
        return Err(Error::EmptyClip(format!("{} has no samples", path.display())));
    }
    Ok(AudioClip {
        samples,
        sample_rate: spec.sample_rate,
        speaker_id: path
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        utterance_id: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    })
}

pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| Error::ingest(path, e.to_string()))?;
    for &s in &clip.samples {
        w.write_sample(s).map_err(|e| Error::ingest(path, e.to_string()))?;
    }
    w.finalize().map_err(|e| Error::ingest(path, e.to_string()))
}

/// Band-limited rational-ratio resampling. Output length is
/// `round(len · to / from)` with the filter delay removed.
pub fn resample(samples: &[f32], from: u32, to: u32) -> Result<Vec<f32>> {
    if from == 0 || to == 0 {
        return Err(Error::config("sample_rate", "must be positive"));
    }
    if from == to {
        return Ok(samples.to_vec());
    }
    let mut rs = FftFixedInOut::<f32>::new(from as usize, to as usize, 1024, 1)
        .map_err(|e| Error::config("sample_rate", e.to_string()))?;
    let want = (samples.len() as f64 * to as f64 / from as f64).round() as usize;
    let delay = rs.output_delay();
    let mut out = Vec::with_capacity(want + delay + 4096);
    let mut pos = 0;
    let fail = |e: rubato::ResampleError| Error::Shape(format!("resampler: {e}"));
    while pos + rs.input_frames_next() <= samples.len() {
        let n = rs.input_frames_next();
        let chunk = rs.process(&[&samples[pos..pos + n]], None).map_err(fail)?;
        out.extend_from_slice(&chunk[0]);
        pos += n;
    }
    if pos < samples.len() {
        let chunk = rs.process_partial(Some(&[&samples[pos..]]), None).map_err(fail)?;
        out.extend_from_slice(&chunk[0]);
    }
    while out.len() < want + delay {
        let chunk = rs.process_partial::<&[f32]>(None, None).map_err(fail)?;
        out.extend_from_slice(&chunk[0]);
    }
    Ok(out[delay..delay + want].to_vec())
}

/// Loads a file, resamples it to `target_rate`, and scales it down if its
/// peak exceeds 1.
pub fn load_and_resample(path: &Path, target_rate: u32) -> Result<AudioClip> {
    let clip = load_wav(path)?;
    let mut samples = resample(&clip.samples, clip.sample_rate, target_rate)?;
    if samples.is_empty() {
        return Err(Error::EmptyClip(format!("{} resampled to nothing", path.display())));
    }
    if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
        return Err(Error::ingest(path, format!("non-finite sample {bad}")));
    }
    let peak = samples.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    if peak > 1.0 {
        samples.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(AudioClip {
        samples,
        sample_rate: target_rate,
        ..clip
    })
}

pub const TRIM_FRAME: usize = 1024;
pub const TRIM_HOP: usize = 256;
pub const DEFAULT_TRIM_DB: f64 = -40.0;

/// Drops leading and trailing audio whose frame RMS is more than
/// `|threshold_db|` below the loudest frame. Frames are `TRIM_FRAME` long,
/// centered on multiples of `TRIM_HOP`; the interior is never touched.
pub fn trim_silence(clip: &AudioClip, threshold_db: f64) -> Result<AudioClip> {
    let x = &clip.samples;
    if x.is_empty() {
        return Err(Error::EmptyClip("nothing to trim".into()));
    }
    let half = TRIM_FRAME / 2;
    let n_frames = x.len().div_ceil(TRIM_HOP);
    let rms: Vec<f64> = (0..n_frames)
        .map(|f| {
            let center = f * TRIM_HOP;
            let lo = center.saturating_sub(half);
            let hi = (center + half).min(x.len());
            let energy: f64 = x[lo..hi].iter().map(|&v| (v as f64).powi(2)).sum();
            (energy / TRIM_FRAME as f64).sqrt()
        })
        .collect();
    let peak = rms.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::EmptyClip("clip is entirely silent".into()));
    }
    let loud = |r: f64| r > 0.0 && 20.0 * (r / peak).log10() > threshold_db;
    let first = rms.iter().position(|&r| loud(r));
    let last = rms.iter().rposition(|&r| loud(r));
    let (Some(first), Some(last)) = (first, last) else {
        return Err(Error::EmptyClip("clip is entirely below threshold".into()));
    };
    let start = first * TRIM_HOP;
    let end = ((last + 1) * TRIM_HOP).min(x.len());
    Ok(AudioClip {
        samples: x[start..end].to_vec(),
        ..clip.clone()
    })
}
