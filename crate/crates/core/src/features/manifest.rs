use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mel::MelSpectrogram;
use crate::error::{Error, Result};
use crate::tensor_file;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MEL_EXT: &str = "nvcm";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Whether a speaker contributes any training data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeakerSet {
    Seen,
    Unseen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    /// Relative to the manifest root.
    pub mel_path: PathBuf,
    pub n_frames: usize,
    pub split: Split,
    pub speaker_set: SpeakerSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitOptions {
    pub n_unseen: usize,
    /// Utterances moved from each seen speaker's training list into the test list.
    pub test_per_seen: usize,
    pub seed: u64,
}

impl SplitOptions {
    pub fn new(n_unseen: usize, seed: u64) -> Self {
        SplitOptions {
            n_unseen,
            test_per_seen: 1,
            seed,
        }
    }
}

impl DatasetManifest {
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.mel_path)
    }

    pub fn load_mel(&self, entry: &ManifestEntry) -> Result<MelSpectrogram> {
        MelSpectrogram::read(&self.resolve(entry))
    }

    fn speakers_in(&self, set: SpeakerSet) -> BTreeSet<String> {
        self.entries
            .iter()
            .filter(|e| e.speaker_set == set)
            .map(|e| e.speaker_id.clone())
            .collect()
    }

    pub fn seen_speakers(&self) -> BTreeSet<String> {
        self.speakers_in(SpeakerSet::Seen)
    }

    pub fn unseen_speakers(&self) -> BTreeSet<String> {
        self.speakers_in(SpeakerSet::Unseen)
    }

    /// Every speaker, in sorted order.
    pub fn speakers(&self) -> Vec<String> {
        let all: BTreeSet<_> = self.entries.iter().map(|e| e.speaker_id.clone()).collect();
        all.into_iter().collect()
    }

    pub fn select(&self, split: Split, set: SpeakerSet) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| e.split == split && e.speaker_set == set)
            .collect()
    }

    pub fn train(&self) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Split::Train).collect()
    }

    pub fn test(&self) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Split::Test).collect()
    }

    /// Checks disjointness of the speaker sets and that every mel file parses
    /// with the recorded frame count.
    pub fn validate(&self) -> Result<()> {
        let seen = self.seen_speakers();
        if let Some(s) = self.unseen_speakers().intersection(&seen).next() {
            return Err(Error::ingest(
                &self.root,
                format!("speaker {s} is both seen and unseen"),
            ));
        }
        for e in &self.entries {
            if e.speaker_set == SpeakerSet::Unseen && e.split == Split::Train {
                return Err(Error::ingest(
                    &self.root,
                    format!("unseen speaker {} has training utterance {}", e.speaker_id, e.utterance_id),
                ));
            }
            let path = self.resolve(e);
            let mel = MelSpectrogram::read(&path)?;
            if mel.n_frames() != e.n_frames {
                return Err(Error::ingest(
                    &path,
                    format!("manifest says {} frames, file has {}", e.n_frames, mel.n_frames()),
                ));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        tensor_file::write_atomic(path, self.to_jsonl().as_bytes())
    }

    /// Reads a manifest; relative mel paths resolve against its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line)
                .map_err(|e| Error::ingest(path, format!("line {}: {e}", i + 1)))?;
            entries.push(entry);
        }
        if entries.is_empty() {
            return Err(Error::ingest(path, "manifest has no entries"));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(DatasetManifest { root, entries })
    }
}

/// One mel file found under a corpus directory laid out as
/// `<speaker>/<utterance>.nvcm`.
#[derive(Clone, Debug)]
pub struct CorpusFile {
    pub speaker_id: String,
    pub utterance_id: String,
    pub rel_path: PathBuf,
    pub n_frames: usize,
}

pub fn scan_mels(corpus_dir: &Path) -> Result<Vec<CorpusFile>> {
    let mut files = Vec::new();
    let mut speakers: Vec<_> = read_dir_sorted(corpus_dir)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    speakers.sort();
    for dir in speakers {
        let speaker_id = file_name(&dir);
        for path in read_dir_sorted(&dir)? {
            if path.extension().and_then(|e| e.to_str()) != Some(MEL_EXT) {
                continue;
            }
            let mel = MelSpectrogram::read(&path)?;
            files.push(CorpusFile {
                utterance_id: path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                rel_path: PathBuf::from(&speaker_id).join(path.file_name().unwrap()),
                speaker_id: speaker_id.clone(),
                n_frames: mel.n_frames(),
            });
        }
    }
    Ok(files)
}

pub(crate) fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Assigns a seen/unseen speaker split and a train/test utterance split.
///
/// Unseen speakers contribute only test utterances. Each seen speaker has
/// `test_per_seen` utterances held out for testing, always leaving at least
/// one for training.
pub fn split_files(files: Vec<CorpusFile>, root: &Path, opts: &SplitOptions) -> Result<DatasetManifest> {
    let mut by_speaker: BTreeMap<String, Vec<CorpusFile>> = BTreeMap::new();
    for f in files {
        by_speaker.entry(f.speaker_id.clone()).or_default().push(f);
    }
    let n_speakers = by_speaker.len();
    if n_speakers < opts.n_unseen + 1 {
        return Err(Error::config(
            "n_unseen",
            format!("{} unseen speakers need at least {} speakers, corpus has {n_speakers}", opts.n_unseen, opts.n_unseen + 1),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<String> = by_speaker.keys().cloned().collect();
    order.shuffle(&mut rng);
    let unseen: BTreeSet<String> = order[..opts.n_unseen].iter().cloned().collect();

    let mut entries = Vec::new();
    for (speaker, mut utts) in by_speaker {
        utts.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
        let set = if unseen.contains(&speaker) {
            SpeakerSet::Unseen
        } else {
            SpeakerSet::Seen
        };
        let held: BTreeSet<usize> = match set {
            SpeakerSet::Unseen => (0..utts.len()).collect(),
            SpeakerSet::Seen => {
                let n_held = opts.test_per_seen.min(utts.len().saturating_sub(1));
                let mut idx: Vec<usize> = (0..utts.len()).collect();
                idx.shuffle(&mut rng);
                idx.into_iter().take(n_held).collect()
            }
        };
        for (i, f) in utts.into_iter().enumerate() {
            entries.push(ManifestEntry {
                utterance_id: f.utterance_id,
                speaker_id: f.speaker_id,
                mel_path: f.rel_path,
                n_frames: f.n_frames,
                split: if held.contains(&i) { Split::Test } else { Split::Train },
                speaker_set: set,
            });
        }
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries,
    })
}

pub fn build_manifest_with(corpus_dir: &Path, opts: &SplitOptions) -> Result<DatasetManifest> {
    split_files(scan_mels(corpus_dir)?, corpus_dir, opts)
}

/// Scans `<speaker>/<utterance>.nvcm` files under `corpus_dir` and splits
/// them with one held-out utterance per seen speaker.
pub fn build_manifest(corpus_dir: &Path, n_unseen: usize, seed: u64) -> Result<DatasetManifest> {
    build_manifest_with(corpus_dir, &SplitOptions::new(n_unseen, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake(n_speakers: usize, n_utts: usize) -> Vec<CorpusFile> {
        let mut v = Vec::new();
        for s in 0..n_speakers {
            for u in 0..n_utts {
                v.push(CorpusFile {
                    speaker_id: format!("p{s:03}"),
                    utterance_id: format!("p{s:03}_{u:03}"),
                    rel_path: PathBuf::from(format!("p{s:03}/p{s:03}_{u:03}.nvcm")),
                    n_frames: 100 + u,
                });
            }
        }
        v
    }

    #[test]
    fn vctk_sized_split() {
        let m = split_files(fake(108, 3), Path::new("."), &SplitOptions::new(20, 0)).unwrap();
        assert_eq!(m.seen_speakers().len(), 88);
        assert_eq!(m.unseen_speakers().len(), 20);
        assert!(m.seen_speakers().is_disjoint(&m.unseen_speakers()));
        let seen_test = m.select(Split::Test, SpeakerSet::Seen);
        assert_eq!(seen_test.len(), 88);
        assert_eq!(m.select(Split::Test, SpeakerSet::Unseen).len(), 60);
        assert!(m.select(Split::Train, SpeakerSet::Unseen).is_empty());
    }

    #[test]
    fn no_unseen_means_one_test_utterance_per_speaker() {
        let m = split_files(fake(5, 4), Path::new("."), &SplitOptions::new(0, 3)).unwrap();
        assert!(m.unseen_speakers().is_empty());
        let test = m.test();
        assert_eq!(test.len(), 5);
        let speakers: BTreeSet<_> = test.iter().map(|e| e.speaker_id.clone()).collect();
        assert_eq!(speakers.len(), 5);
    }

    #[test]
    fn too_few_speakers_is_a_config_error() {
        let err = split_files(fake(3, 2), Path::new("."), &SplitOptions::new(3, 0)).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let a = split_files(fake(12, 5), Path::new("."), &SplitOptions::new(3, 9)).unwrap();
        let b = split_files(fake(12, 5), Path::new("."), &SplitOptions::new(3, 9)).unwrap();
        let c = split_files(fake(12, 5), Path::new("."), &SplitOptions::new(3, 10)).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        assert_ne!(a.to_jsonl(), c.to_jsonl());
    }

    #[test]
    fn a_seen_speaker_keeps_a_training_utterance() {
        let opts = SplitOptions {
            n_unseen: 0,
            test_per_seen: 10,
            seed: 1,
        };
        let m = split_files(fake(2, 3), Path::new("."), &opts).unwrap();
        assert_eq!(m.train().len(), 2);
        assert_eq!(m.test().len(), 4);
    }

    #[test]
    fn jsonl_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        for s in ["a", "b", "c"] {
            fs::create_dir(dir.path().join(s)).unwrap();
            for u in 0..2 {
                let mel = MelSpectrogram::new(ndarray::Array2::zeros((80, 3 + u))).unwrap();
                mel.write(&dir.path().join(s).join(format!("{s}{u}.nvcm"))).unwrap();
            }
        }
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let m = build_manifest(dir.path(), 1, 0).unwrap();
        assert_eq!(m.entries.len(), 6);
        m.validate().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        m.write(&path).unwrap();
        let back = DatasetManifest::read(&path).unwrap();
        assert_eq!(back, m);
        let first = fs::read_to_string(&path).unwrap();
        assert!(first.lines().next().unwrap().contains("\"split\":"));
    }

    #[test]
    fn validation_catches_frame_count_drift() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("a")).unwrap();
        MelSpectrogram::new(ndarray::Array2::zeros((80, 4)))
            .unwrap()
            .write(&dir.path().join("a/u.nvcm"))
            .unwrap();
        let mut m = build_manifest(dir.path(), 0, 0).unwrap();
        m.entries[0].n_frames = 5;
        assert!(m.validate().is_err());
    }
}
