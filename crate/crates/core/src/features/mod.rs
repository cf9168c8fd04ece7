//! Audio ingestion, log-mel extraction and dataset manifests.

pub mod audio;
pub mod manifest;
pub mod mel;

use std::fs;
use std::path::Path;

pub use audio::{load_and_resample, load_wav, resample, trim_silence, write_wav, AudioClip};
pub use manifest::{
    build_manifest, build_manifest_with, DatasetManifest, ManifestEntry, SpeakerSet, Split,
    SplitOptions, MANIFEST_FILE,
};
pub use mel::{mel_spectrogram, MelExtractor, MelSpectrogram};

use crate::error::{Error, Result};

/// Converts a `<speaker>/<utterance>.wav` tree into the matching
/// `<speaker>/<utterance>.nvcm` tree of log-mel files.
///
/// Returns the number of files written.
pub fn extract_corpus(wav_dir: &Path, out_dir: &Path, trim_db: f64) -> Result<usize> {
    let extractor = MelExtractor::new();
    let mut written = 0;
    for speaker_dir in manifest::read_dir_sorted(wav_dir)? {
        if !speaker_dir.is_dir() {
            continue;
        }
        let speaker = speaker_dir.file_name().unwrap().to_owned();
        let target = out_dir.join(&speaker);
        for path in manifest::read_dir_sorted(&speaker_dir)? {
            let is_wav = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
            if !is_wav {
                continue;
            }
            let clip = load_and_resample(&path, mel::SAMPLE_RATE)?;
            let clip = trim_silence(&clip, trim_db)?;
            let mel = extractor.extract(&clip).map_err(|e| Error::ingest(&path, e.to_string()))?;
            fs::create_dir_all(&target).map_err(|e| Error::io(&target, e))?;
            let stem = path.file_stem().unwrap();
            mel.write(&target.join(stem).with_extension(manifest::MEL_EXT))?;
            written += 1;
        }
    }
    if written == 0 {
        return Err(Error::ingest(wav_dir, "no wav files found under speaker directories"));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_tree_becomes_mel_tree() {
        let wavs = tempfile::tempdir().unwrap();
        let mels = tempfile::tempdir().unwrap();
        for spk in ["s1", "s2"] {
            fs::create_dir(wavs.path().join(spk)).unwrap();
            let tone: Vec<f32> = (0..24_000)
                .map(|i| 0.3 * (i as f32 * 0.05).sin())
                .collect();
            write_wav(&wavs.path().join(spk).join("u1.wav"), &AudioClip::new(tone, 48_000)).unwrap();
        }
        assert_eq!(extract_corpus(wavs.path(), mels.path(), -40.0).unwrap(), 2);
        let m = build_manifest(mels.path(), 1, 0).unwrap();
        assert_eq!(m.entries.len(), 2);
        m.validate().unwrap();
        // 0.5 s at 22050 Hz
        assert_eq!(m.entries[0].n_frames, mel::frame_count(11_025));
    }
}
