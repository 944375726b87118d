//! Experiment configuration as a key-value tree: presets, file overlays,
//! dotted-path overrides and unknown-key rejection.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use toml::{Table, Value};

use crate::corpus::{generate_from_world, Corpus, CorpusError, GeneratorConfig, World};
use crate::encoders::{ModalityId, ModelConfig};
use crate::masking::MaskingConfig;
use crate::trainer::{AdamConfig, Phase, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {msg}")]
    Invalid { key: String, msg: String },
    #[error("unknown preset `{0}` (expected toy or reference)")]
    UnknownPreset(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    /// Dotted key path the error refers to, if any.
    pub fn key(&self) -> Option<&str> {
        match self {
            Self::UnknownKey(k) | Self::Invalid { key: k, .. } => Some(k),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Size and seed of the pre-training corpus; every other generator setting
/// (including the world seed) is shared with `data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainDataConfig {
    pub n_clips: usize,
    pub seed: u64,
}

/// Hyperparameters of one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every_steps: u64,
    pub total_steps: u64,
    pub margin: f64,
    pub seed: u64,
    pub eval_every_steps: u64,
    pub crop_s: u32,
    pub freeze_query: bool,
    pub modalities: Vec<ModalityId>,
    pub val_batches: usize,
    pub adam: AdamConfig,
}

impl PhaseConfig {
    fn from_train(t: &TrainConfig) -> Self {
        Self {
            batch_size: t.batch_size,
            lr0: t.lr0,
            decay_factor: t.decay_factor,
            decay_every_steps: t.decay_every_steps,
            total_steps: t.total_steps,
            margin: t.margin,
            seed: t.seed,
            eval_every_steps: t.eval_every_steps,
            crop_s: t.crop_s,
            freeze_query: t.freeze_query,
            modalities: t.modalities.clone(),
            val_batches: t.val_batches,
            adam: t.adam,
        }
    }

    fn to_train(&self, phase: Phase, masking: &MaskingConfig) -> TrainConfig {
        TrainConfig {
            phase,
            batch_size: self.batch_size,
            lr0: self.lr0,
            decay_factor: self.decay_factor,
            decay_every_steps: self.decay_every_steps,
            total_steps: self.total_steps,
            margin: self.margin,
            masking: masking.clone(),
            seed: self.seed,
            eval_every_steps: self.eval_every_steps,
            crop_s: self.crop_s,
            freeze_query: self.freeze_query,
            modalities: self.modalities.clone(),
            val_batches: self.val_batches,
            adam: self.adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    /// Downstream (captioned) corpus.
    pub data: GeneratorConfig,
    pub pretrain_data: PretrainDataConfig,
    pub model: ModelConfig,
    pub masking: MaskingConfig,
    pub pretrain: PhaseConfig,
    pub finetune: PhaseConfig,
}

impl ExperimentConfig {
    /// Desk-scale defaults.
    pub fn toy() -> Self {
        Self {
            preset: "toy".into(),
            data: GeneratorConfig::toy(),
            pretrain_data: PretrainDataConfig { n_clips: 6000, seed: 101 },
            model: ModelConfig::toy(),
            masking: MaskingConfig::default(),
            pretrain: PhaseConfig::from_train(&TrainConfig::toy_pretrain()),
            finetune: PhaseConfig::from_train(&TrainConfig::toy_finetune()),
        }
    }

    /// Full-size hyperparameters for documentation; not meant to run on a desk.
    pub fn reference() -> Self {
        Self {
            preset: "reference".into(),
            data: GeneratorConfig::reference(),
            pretrain_data: PretrainDataConfig {
                n_clips: 100_000,
                seed: 101,
            },
            model: ModelConfig::reference(),
            masking: MaskingConfig::default(),
            pretrain: PhaseConfig::from_train(&TrainConfig::reference_pretrain()),
            finetune: PhaseConfig::from_train(&TrainConfig::reference_finetune()),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "reference" => Ok(Self::reference()),
            other => Err(ConfigError::UnknownPreset(other.into())),
        }
    }

    pub fn pretrain_generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            n_clips: self.pretrain_data.n_clips,
            seed: self.pretrain_data.seed,
            ..self.data.clone()
        }
    }

    /// The pre-training corpus and the downstream corpus. Both are drawn
    /// from the world (projections and codebook) of the downstream config.
    pub fn generate_corpora(&self) -> std::result::Result<(Corpus, Corpus), CorpusError> {
        let world = World::new(&self.data);
        let data = generate_from_world(&self.data, &world)?;
        let pre = generate_from_world(&self.pretrain_generator(), &world)?;
        Ok((pre, data))
    }

    pub fn pretrain_train(&self) -> TrainConfig {
        self.pretrain.to_train(Phase::Pretrain, &self.masking)
    }

    pub fn finetune_train(&self, phase: Phase) -> TrainConfig {
        self.finetune.to_train(phase, &self.masking)
    }

    pub fn to_tree(&self) -> Table {
        match Value::try_from(self).expect("config serializes to a tree") {
            Value::Table(t) => t,
            _ => unreachable!("config is a table"),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Hex SHA-256 of the resolved TOML.
    pub fn fingerprint(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Semantic checks, reported against the owning section.
    pub fn validate(&self) -> Result<()> {
        let inv = |key: &str, msg: String| ConfigError::Invalid { key: key.into(), msg };
        self.data.validate().map_err(|e| inv("data", e.to_string()))?;
        if self.pretrain_data.n_clips == 0 {
            return Err(inv("pretrain_data.n_clips", "must be >= 1".into()));
        }
        self.model.validate().map_err(|e| inv("model", e.to_string()))?;
        if self.model.vocab_size != self.data.vocab_size {
            return Err(inv(
                "model.vocab_size",
                format!("{} differs from data.vocab_size {}", self.model.vocab_size, self.data.vocab_size),
            ));
        }
        self.masking.validate().map_err(|e| inv("masking", e.to_string()))?;
        self.pretrain_train().validate().map_err(|e| inv("pretrain", e.to_string()))?;
        self.finetune_train(Phase::Finetune).validate().map_err(|e| inv("finetune", e.to_string()))?;
        Ok(())
    }

    /// Parses a config text: an optional `preset` key picks the base, the
    /// remaining keys overlay it. Unknown keys are rejected with their path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let overlay: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let preset = match overlay.get("preset") {
            None => "toy".to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(_) => {
                return Err(ConfigError::Invalid {
                    key: "preset".into(),
                    msg: "must be a string".into(),
                })
            }
        };
        let mut tree = Self::preset(&preset)?.to_tree();
        merge(&mut tree, &overlay, "")?;
        Self::from_tree(tree)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn from_tree(tree: Table) -> Result<Self> {
        let cfg: Self = Value::Table(tree).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `section.key=value` overrides. Values parse as TOML literals,
    /// falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = self.to_tree();
        for o in overrides {
            let o = o.as_ref();
            let (path, raw) = o.split_once('=').ok_or_else(|| ConfigError::Parse(format!("override `{o}` is not key=value")))?;
            set_path(&mut tree, path.trim(), parse_value(raw.trim()))?;
        }
        Self::from_tree(tree)
    }
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn same_kind(a: &Value, b: &Value) -> bool {
    matches!(
        (a, b),
        (Value::Integer(_), Value::Float(_)) | (Value::Float(_), Value::Integer(_))
    ) || std::mem::discriminant(a) == std::mem::discriminant(b)
}

fn coerce(base: &Value, v: &Value) -> Value {
    match (base, v) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(*i as f64),
        _ => v.clone(),
    }
}

/// Overlays `src` onto `dst`; every key of `src` must exist in `dst`.
fn merge(dst: &mut Table, src: &Table, prefix: &str) -> Result<()> {
    for (k, v) in src {
        let path = join(prefix, k);
        let Some(slot) = dst.get_mut(k) else {
            return Err(ConfigError::UnknownKey(path));
        };
        match (slot, v) {
            (Value::Table(d), Value::Table(s)) => merge(d, s, &path)?,
            (slot, v) => {
                if !same_kind(slot, v) {
                    return Err(ConfigError::Invalid {
                        key: path,
                        msg: format!("expected {}, got {}", slot.type_str(), v.type_str()),
                    });
                }
                *slot = coerce(slot, v);
            }
        }
    }
    Ok(())
}

fn set_path(tree: &mut Table, path: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = tree;
    for (i, part) in parts.iter().enumerate() {
        let here = parts[..=i].join(".");
        if i + 1 == parts.len() {
            let slot = cur.get_mut(*part).ok_or_else(|| ConfigError::UnknownKey(here.clone()))?;
            if matches!(slot, Value::Table(_)) {
                return Err(ConfigError::Invalid {
                    key: here,
                    msg: "is a section, not a value".into(),
                });
            }
            let value = if !same_kind(slot, &value) && matches!(value, Value::String(_)) {
                return Err(ConfigError::Invalid {
                    key: here,
                    msg: format!("expected {}, got string", slot.type_str()),
                });
            } else {
                coerce(slot, &value)
            };
            *slot = value;
            return Ok(());
        }
        cur = match cur.get_mut(*part) {
            Some(Value::Table(t)) => t,
            _ => return Err(ConfigError::UnknownKey(here)),
        };
    }
    Err(ConfigError::UnknownKey(path.to_string()))
}
