//! Video encoder Ψ (multimodal transformer over expert-feature tokens) and the
//! query encoders Φ (feature queries for pre-training, captions for fine-tuning).

mod layers;
mod model;
mod params;

pub use layers::{gated_embedding_unit, netvlad_aggregate, Geu, Linear, MixtureHead, NetVlad, Transformer};
pub use model::{CaptionAggregation, FeatureDims, Model, QueryOut, VideoOut};
pub use params::{ParamId, ParamStore, Session};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

/// Video modality. Ordering is fixed and determines every per-modality layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityId {
    Rgb,
    Audio,
    Asr,
}

pub const MODALITIES: [ModalityId; 3] = [ModalityId::Rgb, ModalityId::Audio, ModalityId::Asr];

impl ModalityId {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        MODALITIES.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Rgb => "rgb",
            Self::Audio => "audio",
            Self::Asr => "asr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Some(Self::Rgb),
            "audio" | "aud" => Some(Self::Audio),
            "asr" | "speech" => Some(Self::Asr),
            _ => None,
        }
    }
}

impl std::fmt::Display for ModalityId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-modality sequence caps for the video encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Caps {
    pub rgb: usize,
    pub audio: usize,
    pub asr: usize,
}

impl Caps {
    pub fn get(&self, m: ModalityId) -> usize {
        match m {
            ModalityId::Rgb => self.rgb,
            ModalityId::Audio => self.audio,
            ModalityId::Asr => self.asr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub caps: Caps,
    /// Temporal embeddings on Ψ's feature tokens.
    pub temporal_psi: bool,
    /// Temporal embeddings on Φ's feature tokens. Off in every shipped preset.
    pub temporal_phi: bool,
    /// Size of the learned temporal table; larger times clamp to the last row.
    pub max_time: usize,
    pub vocab_size: usize,
    pub netvlad_clusters: usize,
    pub aggregation: CaptionAggregation,
    /// Consecutive ASR wordpieces handed to Φ when speech supervises.
    pub query_asr_window: usize,
    /// Consecutive caption tokens handed to Φ during fine-tuning.
    pub caption_window: usize,
    /// Whether caption word embeddings are trained (they start from the
    /// corpus codebook and are frozen otherwise).
    pub train_caption_embeddings: bool,
    pub init_seed_offset: u64,
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            dropout: 0.0,
            caps: Caps {
                rgb: 30,
                audio: 30,
                asr: 128,
            },
            temporal_psi: true,
            temporal_phi: false,
            max_time: 32,
            vocab_size: 256,
            netvlad_clusters: 4,
            aggregation: CaptionAggregation::Netvlad,
            query_asr_window: 30,
            caption_window: 30,
            train_caption_embeddings: false,
            init_seed_offset: 0,
        }
    }

    pub fn reference() -> Self {
        Self {
            d_model: 512,
            n_layers: 4,
            n_heads: 4,
            d_ff: 3072,
            dropout: 0.1,
            caps: Caps {
                rgb: 30,
                audio: 30,
                asr: 128,
            },
            temporal_psi: true,
            temporal_phi: false,
            max_time: 128,
            vocab_size: 30522,
            netvlad_clusters: 20,
            aggregation: CaptionAggregation::Netvlad,
            query_asr_window: 30,
            caption_window: 30,
            train_caption_embeddings: false,
            init_seed_offset: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EncoderError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "model.d_model ({}) must be a positive multiple of model.n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.caps.rgb == 0 || self.caps.audio == 0 || self.caps.asr == 0 {
            return bad("model.caps entries must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("model.dropout {} not in [0, 1)", self.dropout));
        }
        if self.netvlad_clusters == 0 || self.vocab_size == 0 || self.max_time == 0 {
            return bad("model.netvlad_clusters, model.vocab_size and model.max_time must be >= 1".into());
        }
        if self.query_asr_window == 0 || self.caption_window == 0 || self.d_ff == 0 {
            return bad("model.query_asr_window, model.caption_window and model.d_ff must be >= 1".into());
        }
        Ok(())
    }
}

/// Per-modality aggregated video embeddings; an absent modality is the zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRepr {
    pub parts: [Vec<f64>; 3],
}

impl VideoRepr {
    pub fn new(parts: [Vec<f64>; 3]) -> Self {
        Self { parts }
    }

    pub fn part(&self, m: ModalityId) -> &[f64] {
        &self.parts[m.index()]
    }

    pub fn present(&self) -> [bool; 3] {
        std::array::from_fn(|m| self.parts[m].iter().any(|v| *v != 0.0))
    }
}

/// Per-modality query embeddings plus mixture weights over modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRepr {
    pub parts: [Vec<f64>; 3],
    pub weights: [f64; 3],
}

impl QueryRepr {
    pub fn new(parts: [Vec<f64>; 3], weights: [f64; 3]) -> Self {
        Self { parts, weights }
    }

    pub fn part(&self, m: ModalityId) -> &[f64] {
        &self.parts[m.index()]
    }

    pub fn part_len(&self) -> usize {
        self.parts[0].len()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncoderError {
    #[error("{modality} features have dimension {got}, expected {expected}")]
    FeatureDim {
        modality: ModalityId,
        expected: usize,
        got: usize,
    },
    #[error("video has no present modality")]
    NoModality,
    #[error("{0} query is empty")]
    EmptyQuery(&'static str),
    #[error("caption token {token} outside vocabulary of {vocab}")]
    OutOfVocab { token: u32, vocab: usize },
    #[error("{0} sequence exceeds its cap")]
    OverCap(ModalityId),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;
