//! Probing protocol for a frozen model: a speaker classifier on the
//! quantized content embedding, a linear speaker probe on S, the L1
//! reconstruction error and a 2-D map of speaker embeddings.
//!
//! Probes are trained on the train split of seen speakers and scored on
//! their held-out test utterances. The content probe predicts the speaker
//! of every frame and reports frame-wise accuracy, so lower means less
//! speaker information left in the content path.

pub mod probe;
pub mod tsne;

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::config::EvalSettings;
use crate::error::{Error, Result};
use crate::features::{DatasetManifest, ManifestEntry, Split, SpeakerSet};
use crate::model::NoiseVc;
use crate::nn::{Parameterized, SeqBatch};
use crate::trainer::{Checkpoint, TrainConfig};

pub use probe::{FrameClassifier, LinearClassifier, ProbeConfig, ProbeKind, Standardizer};
pub use tsne::{silhouette, tsne};

/// Hash of every parameter value, to show a probe left the model alone.
pub fn param_fingerprint(net: &dyn Parameterized) -> u64 {
    let mut h = DefaultHasher::new();
    net.visit("", &mut |name, p| {
        name.hash(&mut h);
        for v in p.value.iter() {
            v.to_bits().hash(&mut h);
        }
    });
    h.finish()
}

/// Quantized content embedding `Q` of one utterance, `[T × D]`.
pub fn content_embedding(net: &NoiseVc, frames: &Array2<f32>) -> Result<Array2<f32>> {
    let (_, q) = net.encode_content(&SeqBatch::single(frames.clone()))?;
    Ok(q.quantized.data)
}

/// Speaker vector `S` of one utterance.
pub fn speaker_vector(net: &NoiseVc, frames: &Array2<f32>) -> Result<Vec<f32>> {
    let s = net.encode_speaker(&SeqBatch::single(frames.clone()), 1)?;
    Ok(s.vectors.row(0).to_vec())
}

fn stack_rows(rows: &[Vec<f32>]) -> Array2<f32> {
    let width = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows.len(), width), |(i, j)| rows[i][j])
}

/// Seen-speaker train and test entries with speaker labels indexed into the
/// sorted list of training speakers.
struct ProbeSplit<'a> {
    classes: Vec<String>,
    train: Vec<(&'a ManifestEntry, usize)>,
    test: Vec<(&'a ManifestEntry, usize)>,
}

fn probe_split<'a>(manifest: &'a DatasetManifest) -> Result<ProbeSplit<'a>> {
    let train_entries = manifest.select(Split::Train, SpeakerSet::Seen);
    let test_entries = manifest.select(Split::Test, SpeakerSet::Seen);
    let classes: Vec<String> = train_entries
        .iter()
        .map(|e| e.speaker_id.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let label = |e: &'a ManifestEntry| {
        index
            .get(e.speaker_id.as_str())
            .map(|&i| (e, i))
            .ok_or_else(|| {
                Error::ingest(
                    &manifest.root,
                    format!("test speaker {} has no training utterances", e.speaker_id),
                )
            })
    };
    let train = train_entries.into_iter().map(label).collect::<Result<Vec<_>>>()?;
    let test = test_entries.into_iter().map(label).collect::<Result<Vec<_>>>()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::ingest(&manifest.root, "probing needs seen-speaker train and test utterances"));
    }
    Ok(ProbeSplit { classes, train, test })
}

fn embed_sequences(
    net: &NoiseVc,
    manifest: &DatasetManifest,
    items: &[(&ManifestEntry, usize)],
) -> Result<(Vec<Array2<f32>>, Vec<Vec<usize>>)> {
    let mut xs = Vec::with_capacity(items.len());
    let mut ys = Vec::with_capacity(items.len());
    for (e, label) in items {
        let q = content_embedding(net, &manifest.load_mel(e)?.frames())?;
        ys.push(vec![*label; q.nrows()]);
        xs.push(q);
    }
    Ok((xs, ys))
}

fn embed_speakers(
    net: &NoiseVc,
    manifest: &DatasetManifest,
    items: &[(&ManifestEntry, usize)],
) -> Result<(Array2<f32>, Vec<usize>)> {
    let mut rows = Vec::with_capacity(items.len());
    for (e, _) in items {
        rows.push(speaker_vector(net, &manifest.load_mel(e)?.frames())?);
    }
    Ok((stack_rows(&rows), items.iter().map(|(_, l)| *l).collect()))
}

/// Frame-wise speaker accuracy (percent) of a convolutional probe on `Q`.
pub fn probe_content(net: &NoiseVc, manifest: &DatasetManifest, cfg: &ProbeConfig) -> Result<f64> {
    let split = probe_split(manifest)?;
    let (train_x, train_y) = embed_sequences(net, manifest, &split.train)?;
    let (test_x, test_y) = embed_sequences(net, manifest, &split.test)?;
    let probe = FrameClassifier::train(&train_x, &train_y, split.classes.len(), cfg)?;
    Ok(probe.accuracy(&test_x, &test_y))
}

/// Held-out accuracy (percent) of a linear speaker probe on `S`.
pub fn probe_speaker(net: &NoiseVc, manifest: &DatasetManifest, cfg: &ProbeConfig) -> Result<f64> {
    let split = probe_split(manifest)?;
    let (train_x, train_y) = embed_speakers(net, manifest, &split.train)?;
    let (test_x, test_y) = embed_speakers(net, manifest, &split.test)?;
    let probe = LinearClassifier::train(&train_x, &train_y, split.classes.len(), cfg)?;
    Ok(probe.accuracy(&test_x, &test_y))
}

/// Mean `|x − x̂|` over the test split, each utterance reconstructing
/// itself.
pub fn l1_reconstruction(net: &NoiseVc, manifest: &DatasetManifest) -> Result<f64> {
    let entries = manifest.test();
    if entries.is_empty() {
        return Err(Error::ingest(&manifest.root, "manifest has no test utterances"));
    }
    let (mut sum, mut count) = (0.0f64, 0usize);
    for e in entries {
        let x = SeqBatch::single(manifest.load_mel(e)?.frames());
        let out = net.forward(&x, &x)?;
        sum += crate::blocks::l1_distance(&x.data, &out.x_hat.data) * x.data.len() as f64;
        count += x.data.len();
    }
    Ok(sum / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub x: f64,
    pub y: f64,
    pub speaker_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub n_points: usize,
    pub perplexity: f64,
    pub centroids: Vec<MapPoint>,
    /// Absent when no speaker has two or more utterances.
    pub silhouette: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMap {
    pub points: Vec<MapPoint>,
    pub summary: MapSummary,
}

/// Where the centroids and silhouette go next to a map at `out_path`.
pub fn summary_path(out_path: &Path) -> PathBuf {
    out_path.with_extension("summary.json")
}

/// Embeds every utterance of `set` speakers in two dimensions. Points are
/// written to `out_path` as JSON lines and the summary beside them.
pub fn export_embedding_map(
    net: &NoiseVc,
    manifest: &DatasetManifest,
    set: SpeakerSet,
    out_path: &Path,
    settings: &EvalSettings,
) -> Result<EmbeddingMap> {
    let entries: Vec<&ManifestEntry> = manifest.entries.iter().filter(|e| e.speaker_set == set).collect();
    let speakers: Vec<String> = entries
        .iter()
        .map(|e| e.speaker_id.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if speakers.len() < 2 {
        return Err(Error::ingest(
            &manifest.root,
            format!("embedding map needs at least 2 speakers, found {}", speakers.len()),
        ));
    }
    let mut rows = Vec::with_capacity(entries.len());
    let mut labels = Vec::with_capacity(entries.len());
    for e in &entries {
        rows.push(speaker_vector(net, &manifest.load_mel(e)?.frames())?);
        labels.push(speakers.iter().position(|s| *s == e.speaker_id).expect("speaker listed"));
    }
    let x = stack_rows(&rows).mapv(|v| v as f64);
    let perplexity = settings.tsne_perplexity.min((x.nrows() as f64 - 1.0) / 3.0).max(1.0);
    let y = tsne(&x, perplexity, settings.tsne_iterations, settings.tsne_seed);
    let points: Vec<MapPoint> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| MapPoint {
            x: y[[i, 0]],
            y: y[[i, 1]],
            speaker_id: e.speaker_id.clone(),
        })
        .collect();
    let centroids = speakers
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
            let c = y.select(Axis(0), &idx).mean_axis(Axis(0)).expect("speaker has points");
            MapPoint {
                x: c[0],
                y: c[1],
                speaker_id: s.clone(),
            }
        })
        .collect();
    let summary = MapSummary {
        n_points: points.len(),
        perplexity,
        centroids,
        silhouette: silhouette(&y, &labels),
    };
    let mut text = String::new();
    for p in &points {
        text.push_str(&serde_json::to_string(p).expect("point serializes"));
        text.push('\n');
    }
    if let Some(dir) = out_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    crate::tensor_file::write_atomic(out_path, text.as_bytes())?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    crate::tensor_file::write_atomic(&summary_path(out_path), json.as_bytes())?;
    Ok(EmbeddingMap { points, summary })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementReport {
    pub model_tag: String,
    /// Lower means less speaker information in `Q`.
    pub content_probe_speaker_acc: f64,
    pub speaker_probe_acc: f64,
    pub l1_reconstruction: f64,
    /// Augmentation probability, absent when augmentation was off.
    pub alpha: Option<f64>,
}

impl DisentanglementReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        crate::tensor_file::write_atomic(path, json.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::ingest(path, e.to_string()))
    }
}

fn augmented(cfg: &TrainConfig) -> bool {
    cfg.augment.alpha > 0.0 && cfg.augment.sigma > 0.0
}

/// `IN+VQ`, `IN+VQ+CPC`, and a `+aug` suffix when noise augmentation was on.
pub fn model_tag(cfg: &TrainConfig) -> String {
    let mut tag = String::from("IN+VQ");
    if cfg.train.cpc_weight > 0.0 {
        tag.push_str("+CPC");
    }
    if augmented(cfg) {
        tag.push_str("+aug");
    }
    tag
}

pub fn evaluate(ckpt: &Checkpoint, manifest: &DatasetManifest, settings: &EvalSettings) -> Result<DisentanglementReport> {
    let net = &ckpt.net;
    Ok(DisentanglementReport {
        model_tag: model_tag(&ckpt.config),
        content_probe_speaker_acc: probe_content(net, manifest, &ProbeConfig::content(settings))?,
        speaker_probe_acc: probe_speaker(net, manifest, &ProbeConfig::speaker(settings))?,
        l1_reconstruction: l1_reconstruction(net, manifest)?,
        alpha: augmented(&ckpt.config).then_some(ckpt.config.augment.alpha),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Preset, RunConfig};
    use crate::model::ModelConfig;
    use crate::synth::{generate_corpus_with, SyntheticSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

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

    fn small_corpus(dir: &Path, speakers: usize, utts: usize) -> DatasetManifest {
        let spec = SyntheticSpec {
            n_speakers: speakers,
            utterance_len_frames: (40, 60),
            unseen_fraction: 0.4,
            ..SyntheticSpec::default()
        };
        generate_corpus_with(&spec, utts, dir, 2).unwrap()
    }

    fn quick() -> EvalSettings {
        EvalSettings {
            probe_epochs: 3,
            probe_channels: 8,
            tsne_iterations: 250,
            ..EvalSettings::default()
        }
    }

    #[test]
    fn probes_leave_the_model_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = small_corpus(dir.path(), 5, 5);
        let net = tiny_net();
        let before = param_fingerprint(&net);
        let s = quick();
        let a = probe_content(&net, &manifest, &ProbeConfig::content(&s)).unwrap();
        let b = probe_speaker(&net, &manifest, &ProbeConfig::speaker(&s)).unwrap();
        assert_eq!(param_fingerprint(&net), before);
        assert!((0.0..=100.0).contains(&a) && (0.0..=100.0).contains(&b));
        assert_eq!(a, probe_content(&net, &manifest, &ProbeConfig::content(&s)).unwrap());
    }

    #[test]
    fn single_speaker_probe_is_certain() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = small_corpus(dir.path(), 5, 5);
        let keep = manifest.seen_speakers().into_iter().next().unwrap();
        manifest.entries.retain(|e| e.speaker_id == keep);
        let net = tiny_net();
        let s = quick();
        assert_eq!(probe_content(&net, &manifest, &ProbeConfig::content(&s)).unwrap(), 100.0);
        assert_eq!(probe_speaker(&net, &manifest, &ProbeConfig::speaker(&s)).unwrap(), 100.0);
    }

    #[test]
    fn test_speaker_without_training_data_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = small_corpus(dir.path(), 5, 5);
        let victim = manifest.seen_speakers().into_iter().next().unwrap();
        manifest.entries.retain(|e| !(e.speaker_id == victim && e.split == Split::Train));
        let s = quick();
        assert!(probe_speaker(&tiny_net(), &manifest, &ProbeConfig::speaker(&s)).is_err());
    }

    #[test]
    fn l1_of_finite_model_is_positive() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = small_corpus(dir.path(), 5, 3);
        let l1 = l1_reconstruction(&tiny_net(), &manifest).unwrap();
        assert!(l1.is_finite() && l1 > 0.0);
    }

    #[test]
    fn embedding_map_files_and_degenerate_cases() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = small_corpus(&dir.path().join("corpus"), 5, 4);
        let net = tiny_net();
        let out = dir.path().join("map.jsonl");
        let map = export_embedding_map(&net, &manifest, SpeakerSet::Unseen, &out, &quick()).unwrap();
        assert_eq!(map.points.len(), 8);
        assert_eq!(map.summary.centroids.len(), 2);
        let lines = fs::read_to_string(&out).unwrap();
        let first: MapPoint = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
        assert_eq!(first, map.points[0]);
        let summary: MapSummary = serde_json::from_str(&fs::read_to_string(summary_path(&out)).unwrap()).unwrap();
        assert_eq!(summary, map.summary);
        let again = export_embedding_map(&net, &manifest, SpeakerSet::Unseen, &out, &quick()).unwrap();
        assert_eq!(again, map);

        let single = small_corpus(&dir.path().join("single"), 5, 1);
        let mut one_each = single.clone();
        for e in one_each.entries.iter_mut() {
            e.speaker_set = SpeakerSet::Unseen;
        }
        let m = export_embedding_map(&net, &one_each, SpeakerSet::Unseen, &out, &quick()).unwrap();
        assert_eq!(m.summary.silhouette, None);
        assert!(out.exists());

        let mut lonely = manifest.clone();
        let keep = lonely.unseen_speakers().into_iter().next().unwrap();
        lonely.entries.retain(|e| e.speaker_set == SpeakerSet::Seen || e.speaker_id == keep);
        assert!(export_embedding_map(&net, &lonely, SpeakerSet::Unseen, &out, &quick()).is_err());
    }

    #[test]
    fn tags_follow_the_training_config() {
        let mut cfg = TrainConfig::from(&RunConfig::for_preset(Preset::Desk));
        assert_eq!(model_tag(&cfg), "IN+VQ+CPC+aug");
        cfg.augment.alpha = 0.0;
        assert_eq!(model_tag(&cfg), "IN+VQ+CPC");
        cfg.train.cpc_weight = 0.0;
        assert_eq!(model_tag(&cfg), "IN+VQ");
    }

    #[test]
    fn report_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let r = DisentanglementReport {
            model_tag: "IN+VQ".into(),
            content_probe_speaker_acc: 42.5,
            speaker_probe_acc: 97.0,
            l1_reconstruction: 0.31,
            alpha: None,
        };
        let p = dir.path().join("report.json");
        r.write(&p).unwrap();
        assert_eq!(DisentanglementReport::read(&p).unwrap(), r);
    }
}
