//! Run configuration: two named presets, a TOML file merged over them and
//! `key=value` overrides applied last.
//!
//! Every key in a file or override must already exist in the preset's
//! default tree, and its value must have the same TOML type (an integer is
//! accepted where a float is expected).

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::augment::AugmentPolicy;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::SyntheticSpec;
use crate::trainer::{TrainConfig, TrainSettings};

pub const RESOLVED_CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "desk" => Some(Preset::Desk),
            "paper" => Some(Preset::Paper),
            _ => None,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

/// Feature extraction and corpus splitting for recorded audio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSettings {
    pub n_unseen: usize,
    pub test_per_seen: usize,
    pub seed: u64,
    /// Silence threshold relative to the loudest frame, in dB.
    pub trim_db: f64,
}

impl Default for FeatureSettings {
    fn default() -> Self {
        FeatureSettings {
            n_unseen: 20,
            test_per_seen: 1,
            seed: 0,
            trim_db: crate::features::audio::DEFAULT_TRIM_DB,
        }
    }
}

/// Probe budgets and embedding-map settings. Identical budgets are what
/// make probe accuracies comparable across models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub probe_epochs: usize,
    pub probe_learning_rate: f64,
    pub probe_seed: u64,
    /// Hidden width of the convolutional content probe.
    pub probe_channels: usize,
    pub probe_kernel: usize,
    /// Utterances per probe update.
    pub probe_batch: usize,
    pub tsne_perplexity: f64,
    pub tsne_iterations: usize,
    pub tsne_seed: u64,
    pub griffin_lim_iterations: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            probe_epochs: 20,
            probe_learning_rate: 1e-3,
            probe_seed: 0,
            probe_channels: 64,
            probe_kernel: 5,
            probe_batch: 4,
            tsne_perplexity: 10.0,
            tsne_iterations: 1000,
            tsne_seed: 0,
            griffin_lim_iterations: 60,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("probe_epochs", self.probe_epochs),
            ("probe_channels", self.probe_channels),
            ("probe_kernel", self.probe_kernel),
            ("probe_batch", self.probe_batch),
            ("tsne_iterations", self.tsne_iterations),
            ("griffin_lim_iterations", self.griffin_lim_iterations),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("eval.{key}"), "must be positive"));
            }
        }
        if self.probe_kernel % 2 == 0 {
            return Err(Error::config("eval.probe_kernel", "must be odd"));
        }
        for (key, v) in [
            ("probe_learning_rate", self.probe_learning_rate),
            ("tsne_perplexity", self.tsne_perplexity),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("eval.{key}"), "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub features: FeatureSettings,
    pub synth: SyntheticSpec,
    pub model: ModelConfig,
    pub augment: AugmentPolicy,
    pub train: TrainSettings,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn for_preset(preset: Preset) -> Self {
        let (model, learning_rate) = match preset {
            Preset::Desk => (ModelConfig::desk(), 1e-3),
            Preset::Paper => (ModelConfig::paper(), 1e-4),
        };
        RunConfig {
            preset,
            features: FeatureSettings::default(),
            synth: SyntheticSpec::default(),
            model,
            augment: AugmentPolicy::default(),
            train: TrainSettings {
                learning_rate,
                ..TrainSettings::default()
            },
            eval: EvalSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.preset == Preset::Paper {
            let pins: [(&str, f64, f64); 6] = [
                ("model.codebook_size", self.model.codebook_size as f64, 2048.0),
                ("model.content_dim", self.model.content_dim as f64, 512.0),
                ("model.horizon", self.model.horizon as f64, 34.0),
                ("model.n_negatives", self.model.n_negatives as f64, 20.0),
                ("train.beta", self.train.beta, 0.25),
                ("augment.alpha", self.augment.alpha, 0.5),
            ];
            for (key, got, pinned) in pins {
                if got != pinned {
                    return Err(Error::config(
                        key,
                        format!("the paper preset pins this to {pinned}, got {got}"),
                    ));
                }
            }
        }
        TrainConfig::from(self).validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes to toml")
    }

    /// Writes the resolved config into `dir` so the run can be repeated.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::tensor_file::write_atomic(&dir.join(RESOLVED_CONFIG_FILE), self.to_toml().as_bytes())
    }
}

impl From<&RunConfig> for TrainConfig {
    fn from(c: &RunConfig) -> Self {
        TrainConfig {
            preset: c.preset,
            model: c.model.clone(),
            augment: c.augment,
            train: c.train.clone(),
        }
    }
}

/// Parses `key=value`. The value is read as a TOML literal when possible
/// and as a bare string otherwise, so `model.negatives_from=batch` works.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override `{s}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Usage(format!("override `{s}` has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Resolves the preset, then the file at `path` (if any), then `overrides`.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let file = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<Table>(&text).map_err(|e| Error::config("config", format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    let overrides = overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    resolve(&file, &overrides)
}

pub fn load_config_str(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let file = toml::from_str::<Table>(text).map_err(|e| Error::config("config", e.to_string()))?;
    let overrides = overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    resolve(&file, &overrides)
}

fn resolve(file: &Table, overrides: &[(String, Value)]) -> Result<RunConfig> {
    let mut preset = Preset::Desk;
    for v in file.get("preset").into_iter().chain(
        overrides.iter().filter(|(k, _)| k == "preset").map(|(_, v)| v),
    ) {
        preset = v
            .as_str()
            .and_then(Preset::parse)
            .ok_or_else(|| Error::config("preset", format!("expected \"desk\" or \"paper\", got {v}")))?;
    }
    let mut tree = Value::try_from(RunConfig::for_preset(preset)).expect("defaults serialize");
    let root = tree.as_table_mut().expect("config root is a table");
    merge(root, file, "")?;
    for (key, value) in overrides {
        set_path(root, key, value.clone())?;
    }
    let config: RunConfig = tree
        .try_into()
        .map_err(|e: toml::de::Error| Error::config("config", e.to_string()))?;
    config.validate()?;
    Ok(config)
}

fn merge(dst: &mut Table, src: &Table, prefix: &str) -> Result<()> {
    for (k, v) in src {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let slot = dst
            .get_mut(k)
            .ok_or_else(|| Error::config(&key, "unknown key"))?;
        match (slot, v) {
            (Value::Table(d), Value::Table(s)) => merge(d, s, &key)?,
            (Value::Table(_), _) => return Err(Error::config(&key, "expected a table")),
            (slot, v) => *slot = checked(slot, v, &key)?,
        }
    }
    Ok(())
}

fn set_path(root: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut table = root;
    for part in parts {
        table = match table.get_mut(part) {
            Some(Value::Table(t)) => t,
            _ => return Err(Error::config(key, "unknown key")),
        };
    }
    let slot = table.get_mut(last).ok_or_else(|| Error::config(key, "unknown key"))?;
    if slot.is_table() {
        return Err(Error::config(key, "is a section, not a value"));
    }
    *slot = checked(slot, &value, key)?;
    Ok(())
}

/// `new` converted to the type of `default`, or a type error naming `key`.
fn checked(default: &Value, new: &Value, key: &str) -> Result<Value> {
    match (default, new) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(*i as f64)),
        (Value::Array(d), Value::Array(n)) => {
            let Some(proto) = d.first() else {
                return Ok(new.clone());
            };
            // Tuples serialize as arrays of fixed length.
            n.iter()
                .enumerate()
                .map(|(i, v)| checked(d.get(i).unwrap_or(proto), v, &format!("{key}[{i}]")))
                .collect::<Result<Vec<_>>>()
                .map(Value::Array)
        }
        (d, n) if d.type_str() == n.type_str() => Ok(n.clone()),
        (d, n) => Err(Error::config(
            key,
            format!("expected {}, found {} `{n}`", d.type_str(), n.type_str()),
        )),
    }
}
