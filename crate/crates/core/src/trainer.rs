//! Training loop, metrics log and resumable checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{add_noise, plan_step, AugmentPolicy, Version};
use crate::blocks::LossBundle;
use crate::config::Preset;
use crate::error::{Error, Result};
use crate::features::DatasetManifest;
use crate::model::{LossWeights, ModelConfig, NoiseVc};
use crate::nn::{Adam, AdamState, Parameterized, SeqBatch};
use crate::tensor_file;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    /// Commitment weight β.
    pub beta: f64,
    /// Multiplier of the CPC term; 0 disables it.
    pub cpc_weight: f64,
    pub crop_frames: usize,
    pub seed: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            batch_size: 4,
            steps: 5000,
            learning_rate: 1e-3,
            beta: crate::blocks::DEFAULT_BETA,
            cpc_weight: 1.0,
            crop_frames: 128,
            seed: 0,
            checkpoint_every: 1000,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.crop_frames < 2 {
            return Err(Error::config("train.crop_frames", "must be at least 2"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("train.beta", format!("{} is not a valid weight", self.beta)));
        }
        if !(self.cpc_weight >= 0.0 && self.cpc_weight.is_finite()) {
            return Err(Error::config("train.cpc_weight", "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            commitment: self.beta,
            cpc: self.cpc_weight,
            ..LossWeights::default()
        }
    }
}

/// Everything a training run depends on besides its data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub augment: AugmentPolicy,
    pub train: TrainSettings,
}

impl TrainConfig {
    pub fn for_preset(preset: Preset) -> Self {
        let cfg = crate::config::RunConfig::for_preset(preset);
        TrainConfig {
            preset,
            model: cfg.model,
            augment: cfg.augment,
            train: cfg.train,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        if self.train.cpc_weight > 0.0 && self.train.crop_frames <= self.model.horizon {
            return Err(Error::config(
                "train.crop_frames",
                format!("must exceed the prediction horizon {}", self.model.horizon),
            ));
        }
        Ok(())
    }
}

/// One training example: a crop, its noisy copy and its speaker.
#[derive(Clone, Debug)]
pub struct Example {
    /// `[T × 80]`.
    pub original: Array2<f32>,
    pub augmented: Array2<f32>,
    pub speaker_id: String,
}

/// One optimizer update. The content path sees the originals; each
/// example's speaker input and target follow its own augmentation plan.
/// Returns the losses measured before the update.
pub fn train_step(
    batch: &[Example],
    net: &mut NoiseVc,
    adam: &mut Adam,
    config: &TrainConfig,
    step: u64,
    rng: &mut ChaCha8Rng,
) -> Result<LossBundle> {
    if batch.is_empty() {
        return Err(Error::Shape("empty training batch".into()));
    }
    let mut speaker_views = Vec::with_capacity(batch.len());
    for ex in batch {
        let plan = plan_step(&config.augment, rng);
        speaker_views.push(match plan.speaker_input() {
            Version::Original => ex.original.view(),
            Version::Augmented => ex.augmented.view(),
        });
    }
    let originals: Vec<_> = batch.iter().map(|e| e.original.view()).collect();
    let x_content = SeqBatch::from_items(&originals)?;
    let x_speaker = SeqBatch::from_items(&speaker_views)?;
    net.zero_grad();
    let losses = net.train_pass(&x_content, &x_speaker, &config.train.weights(), rng)?;
    if let Some(term) = losses.non_finite_term() {
        return Err(Error::NonFinite { term, step });
    }
    adam.step(net);
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub rec: f64,
    pub codebook: f64,
    pub commit: f64,
    pub cpc: f64,
    pub total: f64,
}

impl MetricRecord {
    pub fn new(step: u64, l: &LossBundle) -> Self {
        MetricRecord {
            step,
            rec: l.reconstruction,
            codebook: l.codebook_term,
            commit: l.commitment_term,
            cpc: l.cpc,
            total: l.total,
        }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::ingest(path, e.to_string())))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::ingest("checkpoint", format!("bad rng {what}"));
        if self.seed.len() != 64 {
            return Err(bad("seed"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("position"))?);
        Ok(rng)
    }
}

/// Epoch-wise shuffled order over training utterances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataCursor {
    pub order: Vec<usize>,
    pub pos: usize,
}

impl DataCursor {
    fn next(&mut self, n_items: usize, rng: &mut impl Rng) -> usize {
        if self.pos >= self.order.len() {
            self.order = (0..n_items).collect();
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Training-split mels held in memory, `[T × 80]` each.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub utterance_ids: Vec<String>,
    pub speaker_ids: Vec<String>,
    pub frames: Vec<Array2<f32>>,
}

impl TrainData {
    /// Loads every training utterance at least `min_frames` long. Any missing
    /// or unreadable file fails before training starts.
    pub fn load(manifest: &DatasetManifest, min_frames: usize) -> Result<Self> {
        let mut data = TrainData {
            utterance_ids: Vec::new(),
            speaker_ids: Vec::new(),
            frames: Vec::new(),
        };
        for e in manifest.train() {
            let mel = manifest.load_mel(e)?;
            if mel.n_frames() < min_frames {
                continue;
            }
            data.utterance_ids.push(e.utterance_id.clone());
            data.speaker_ids.push(e.speaker_id.clone());
            data.frames.push(mel.frames());
        }
        if data.frames.is_empty() {
            return Err(Error::ingest(
                &manifest.root,
                format!("no training utterance has at least {min_frames} frames"),
            ));
        }
        Ok(data)
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub net: NoiseVc,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub cursor: DataCursor,
    data: TrainData,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: TrainData) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let net = NoiseVc::new(config.model.clone(), &mut rng)?;
        Ok(Trainer {
            adam: Adam::new(config.train.learning_rate as f32),
            net,
            rng,
            step: 0,
            cursor: DataCursor {
                order: Vec::new(),
                pos: 0,
            },
            data,
            config,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, data: TrainData) -> Result<Self> {
        if ckpt.train_utterances != data.utterance_ids {
            return Err(Error::ingest(
                &ckpt.path,
                "training utterances differ from the ones this checkpoint was trained on",
            ));
        }
        let rng = ckpt.rng.restore()?;
        let mut adam = Adam::new(ckpt.config.train.learning_rate as f32);
        adam.state = ckpt.adam;
        Ok(Trainer {
            config: ckpt.config,
            net: ckpt.net,
            adam,
            rng,
            step: ckpt.step,
            cursor: ckpt.cursor,
            data,
        })
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    /// Draws the next batch of random crops and their noisy copies.
    pub fn next_batch(&mut self) -> Vec<Example> {
        let crop = self.config.train.crop_frames;
        let sigma = self.config.augment.sigma;
        (0..self.config.train.batch_size)
            .map(|_| {
                let i = self.cursor.next(self.data.frames.len(), &mut self.rng);
                let frames = &self.data.frames[i];
                let start = self.rng.random_range(0..=frames.nrows() - crop);
                let original = frames.slice(s![start..start + crop, ..]).to_owned();
                let augmented = add_noise(&original, sigma, &mut self.rng);
                Example {
                    original,
                    augmented,
                    speaker_id: self.data.speaker_ids[i].clone(),
                }
            })
            .collect()
    }

    pub fn step_once(&mut self) -> Result<MetricRecord> {
        let batch = self.next_batch();
        let losses = train_step(
            &batch,
            &mut self.net,
            &mut self.adam,
            &self.config,
            self.step + 1,
            &mut self.rng,
        )?;
        self.step += 1;
        Ok(MetricRecord::new(self.step, &losses))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            path: PathBuf::new(),
            step: self.step,
            config: self.config.clone(),
            net: self.net.clone(),
            adam: self.adam.state.clone(),
            rng: RngState::capture(&self.rng),
            cursor: self.cursor.clone(),
            train_utterances: self.data.utterance_ids.clone(),
        }
    }

    /// Trains up to `config.train.steps`, appending to `out/metrics.jsonl`
    /// and writing checkpoints to `out/step-NNNNNN/` plus `out/final/`.
    pub fn run(&mut self, out: &Path) -> Result<Checkpoint> {
        self.run_with(out, &mut |_| {})
    }

    /// [`Trainer::run`], calling `progress` after every step.
    pub fn run_with(&mut self, out: &Path, progress: &mut dyn FnMut(&MetricRecord)) -> Result<Checkpoint> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let metrics_path = out.join(METRICS_FILE);
        let mut metrics = open_metrics(&metrics_path, self.step)?;
        let every = self.config.train.checkpoint_every;
        while self.step < self.config.train.steps {
            let record = self.step_once()?;
            let line = serde_json::to_string(&record).expect("metrics serialize");
            writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
            progress(&record);
            if every > 0 && self.step % every == 0 && self.step < self.config.train.steps {
                metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
                self.checkpoint().save(&out.join(format!("step-{:06}", self.step)))?;
            }
        }
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        let mut ckpt = self.checkpoint();
        let dir = out.join("final");
        ckpt.save(&dir)?;
        ckpt.path = dir;
        Ok(ckpt)
    }
}

/// Opens the metrics log for appending after `step`, dropping any records
/// from later steps left by an interrupted run.
fn open_metrics(path: &Path, step: u64) -> Result<std::io::BufWriter<fs::File>> {
    let kept: Vec<MetricRecord> = if path.exists() {
        read_metrics(path)?.into_iter().filter(|r| r.step <= step).collect()
    } else {
        Vec::new()
    };
    let mut text = String::new();
    for r in &kept {
        text.push_str(&serde_json::to_string(r).expect("metrics serialize"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    let file = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(file))
}

/// Trains from scratch on the training split of `manifest`.
pub fn fit(manifest: &DatasetManifest, config: &TrainConfig, out: &Path) -> Result<Checkpoint> {
    config.validate()?;
    let data = TrainData::load(manifest, config.train.crop_frames)?;
    let mut trainer = Trainer::new(config.clone(), data)?;
    trainer.run(out)
}

/// Continues a run from a saved checkpoint up to `config.train.steps`.
pub fn resume(manifest: &DatasetManifest, ckpt: Checkpoint, out: &Path) -> Result<Checkpoint> {
    let data = TrainData::load(manifest, ckpt.config.train.crop_frames)?;
    let mut trainer = Trainer::from_checkpoint(ckpt, data)?;
    trainer.run(out)
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// Directory it was loaded from or saved to.
    pub path: PathBuf,
    pub step: u64,
    pub config: TrainConfig,
    pub net: NoiseVc,
    pub adam: AdamState,
    pub rng: RngState,
    pub cursor: DataCursor,
    pub train_utterances: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    step: u64,
    config: TrainConfig,
    rng: RngState,
    cursor: DataCursor,
    adam_step: u64,
    train_utterances: Vec<String>,
    /// Parameter name → tensor file, relative to the checkpoint directory.
    params: BTreeMap<String, String>,
    /// Parameter name → first and second moment tensor files.
    moments: BTreeMap<String, (String, String)>,
}

impl Checkpoint {
    /// Writes into a sibling temporary directory and renames it into place.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tmp = dir.with_extension("partial");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(tmp.join("params")).map_err(|e| Error::io(&tmp, e))?;
        fs::create_dir_all(tmp.join("adam")).map_err(|e| Error::io(&tmp, e))?;
        let mut params = BTreeMap::new();
        let mut failure = None;
        self.net.visit("", &mut |name, p| {
            let rel = format!("params/{name}.nvcm");
            if let Err(e) = tensor_file::write_matrix(&tmp.join(&rel), &p.value) {
                failure.get_or_insert(e);
            }
            params.insert(name, rel);
        });
        if let Some(e) = failure {
            return Err(e);
        }
        let mut moments = BTreeMap::new();
        for (name, (m, v)) in &self.adam.moments {
            let (rm, rv) = (format!("adam/{name}.m.nvcm"), format!("adam/{name}.v.nvcm"));
            tensor_file::write_matrix(&tmp.join(&rm), m)?;
            tensor_file::write_matrix(&tmp.join(&rv), v)?;
            moments.insert(name.clone(), (rm, rv));
        }
        let file = CheckpointFile {
            step: self.step,
            config: self.config.clone(),
            rng: self.rng.clone(),
            cursor: self.cursor.clone(),
            adam_step: self.adam.step,
            train_utterances: self.train_utterances.clone(),
            params,
            moments,
        };
        let json = serde_json::to_string_pretty(&file).expect("checkpoint serializes");
        tensor_file::write_atomic(&tmp.join(CHECKPOINT_FILE), json.as_bytes())?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
    }

    /// Accepts the checkpoint directory or its `checkpoint.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let (dir, json_path) = if path.is_dir() {
            (path.to_path_buf(), path.join(CHECKPOINT_FILE))
        } else {
            (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
        };
        let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let file: CheckpointFile =
            serde_json::from_str(&text).map_err(|e| Error::ingest(&json_path, e.to_string()))?;
        file.config.validate()?;
        let mut net = NoiseVc::new(file.config.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut failure = None;
        let mut seen = 0;
        net.visit_mut("", &mut |name, p| {
            if failure.is_some() {
                return;
            }
            let result = file
                .params
                .get(&name)
                .ok_or_else(|| Error::ingest(&json_path, format!("missing parameter {name}")))
                .and_then(|rel| tensor_file::read_matrix(&dir.join(rel)))
                .and_then(|m| {
                    if m.dim() != p.value.dim() {
                        Err(Error::ingest(
                            &json_path,
                            format!("parameter {name} is {:?}, model expects {:?}", m.dim(), p.value.dim()),
                        ))
                    } else {
                        Ok(m)
                    }
                });
            match result {
                Ok(m) => {
                    p.value = m;
                    seen += 1;
                }
                Err(e) => failure = Some(e),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if seen != file.params.len() {
            return Err(Error::ingest(&json_path, "checkpoint has parameters the model lacks"));
        }
        let mut moments = BTreeMap::new();
        for (name, (rm, rv)) in &file.moments {
            let m = tensor_file::read_matrix(&dir.join(rm))?;
            let v = tensor_file::read_matrix(&dir.join(rv))?;
            moments.insert(name.clone(), (m, v));
        }
        Ok(Checkpoint {
            path: dir,
            step: file.step,
            config: file.config,
            net,
            adam: AdamState {
                step: file.adam_step,
                moments,
            },
            rng: file.rng,
            cursor: file.cursor,
            train_utterances: file.train_utterances,
        })
    }
}
