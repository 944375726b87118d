//! Synthetic multimodal clip corpus: generation, binary store, batch sampling.

mod generator;
mod sampler;
mod store;

pub use generator::{generate_corpus, generate_from_world, Corpus, GeneratorConfig, NoiseConfig, World};
pub use sampler::{crop_for_eval, crop_random, sample_batch, CropConfig};
pub use store::{read_store, write_store, Store, STORE_MAGIC, STORE_VERSION};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::ModalityId;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus generation requested zero clips")]
    EmptyCorpus,
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("batch of {requested} clips requested from a pool of {available}")]
    InsufficientData { requested: usize, available: usize },
    #[error("store version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("not a feature store (bad magic)")]
    BadMagic,
    #[error("store truncated: {0}")]
    Truncated(String),
    #[error("checksum mismatch in {0}")]
    Checksum(String),
    #[error("malformed store: {0}")]
    Malformed(String),
    #[error("clip {0} not found")]
    UnknownClip(u64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Row-major sequence of fixed-width feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeq {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSeq {
    pub fn new(dim: usize, data: Vec<f64>) -> Self {
        assert!(dim > 0 && data.len() % dim == 0, "feature data must be whole rows");
        Self { dim, data }
    }

    pub fn empty(dim: usize) -> Self {
        Self::new(dim, Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.dim);
        self.data.extend_from_slice(row);
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let mut out = Self::empty(self.dim);
        for &r in rows {
            out.push(self.row(r));
        }
        out
    }

    pub fn range(&self, start: usize, end: usize) -> Self {
        Self::new(self.dim, self.data[start * self.dim..end * self.dim].to_vec())
    }
}

/// One modality's feature tokens with their timestamps (seconds).
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub features: FeatureSeq,
    pub times: Vec<u32>,
}

impl Stream {
    pub fn new(features: FeatureSeq, times: Vec<u32>) -> Self {
        assert_eq!(features.len(), times.len(), "one timestamp per token");
        Self { features, times }
    }

    pub fn empty(dim: usize) -> Self {
        Self::new(FeatureSeq::empty(dim), Vec::new())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.dim()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self::new(self.features.select(rows), rows.iter().map(|&r| self.times[r]).collect())
    }

    pub fn range(&self, start: usize, end: usize) -> Self {
        Self::new(self.features.range(start, end), self.times[start..end].to_vec())
    }
}

/// One clip's expert-feature streams and caption. `latent` is the generator's
/// ground truth and is never read by an encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub clip_id: u64,
    pub duration_s: u32,
    pub rgb: FeatureSeq,
    pub audio: FeatureSeq,
    pub asr: FeatureSeq,
    pub asr_times: Vec<u32>,
    pub caption_tokens: Vec<u32>,
    pub latent: Vec<f64>,
}

impl ClipRecord {
    pub fn stream(&self, m: ModalityId) -> Stream {
        match m {
            ModalityId::Rgb => Stream::new(self.rgb.clone(), (0..self.rgb.len() as u32).collect()),
            ModalityId::Audio => Stream::new(self.audio.clone(), (0..self.audio.len() as u32).collect()),
            ModalityId::Asr => Stream::new(self.asr.clone(), self.asr_times.clone()),
        }
    }
}

/// A cropped, capped clip ready for the encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    pub clip_id: u64,
    pub streams: [Stream; 3],
    pub caption: Vec<u32>,
}

impl ClipSample {
    pub fn stream(&self, m: ModalityId) -> &Stream {
        &self.streams[m.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Self::Train),
            1 => Some(Self::Val),
            2 => Some(Self::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

/// Expert-feature widths of a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub rgb: usize,
    pub audio: usize,
    pub asr: usize,
}

impl Dims {
    pub fn get(&self, m: ModalityId) -> usize {
        match m {
            ModalityId::Rgb => self.rgb,
            ModalityId::Audio => self.audio,
            ModalityId::Asr => self.asr,
        }
    }
}

/// Everything about a corpus except the clip records themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub dims: Dims,
    pub latent_dim: usize,
    pub vocab_size: usize,
    pub generator: GeneratorConfig,
    /// Per-modality projection matrices, row-major `[D_m, Z]`.
    pub projections: [Vec<f64>; 3],
    /// Vocabulary codebook `[vocab, D_asr]`.
    pub codebook: Vec<f64>,
    pub clip_ids: Vec<u64>,
    pub splits: Vec<Split>,
    /// Byte offset of each record from the start of the record section.
    pub offsets: Vec<u64>,
}

impl CorpusManifest {
    pub fn clip_count(&self) -> usize {
        self.clip_ids.len()
    }

    pub fn split_ids(&self, split: Split) -> Vec<u64> {
        self.clip_ids
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn codebook_tensor(&self) -> crate::tensor::Tensor {
        crate::tensor::Tensor::matrix(self.vocab_size, self.dims.asr, self.codebook.clone())
            .expect("codebook shape")
    }

    pub fn projection(&self, m: ModalityId) -> &[f64] {
        &self.projections[m.index()]
    }
}

/// Source of clips by id, implemented by in-memory corpora and on-disk stores.
pub trait ClipSource: Sync {
    fn manifest(&self) -> &CorpusManifest;
    fn clip(&self, clip_id: u64) -> Result<std::borrow::Cow<'_, ClipRecord>>;
}

/// Dumps one JSON line per clip: id, split, duration and stream lengths.
pub fn manifest_dump(source: &dyn ClipSource) -> Result<String> {
    let m = source.manifest();
    let mut out = String::new();
    for (&id, split) in m.clip_ids.iter().zip(&m.splits) {
        let c = source.clip(id)?;
        let line = serde_json::json!({
            "id": id,
            "split": split.name(),
            "duration_s": c.duration_s,
            "rgb": c.rgb.len(),
            "audio": c.audio.len(),
            "asr": c.asr.len(),
            "caption": c.caption_tokens.len(),
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    Ok(out)
}
