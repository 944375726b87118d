//! Alternating modality-masking pre-training for text-to-video retrieval.
//!
//! A multimodal transformer video encoder is pre-trained by hiding one whole
//! modality (RGB, audio or speech transcript) per batch and predicting its
//! encoding from the remaining two, then fine-tuned on captions and scored
//! with recall/rank metrics.

pub mod config;
pub mod corpus;
pub mod encoders;
pub mod eval;
pub mod masking;
pub mod objective;
pub mod tensor;
pub mod trainer;










pub use config::ExperimentConfig;
pub use corpus::{ClipRecord, CorpusManifest, GeneratorConfig};
pub use encoders::{ModalityId, Model, ModelConfig, QueryRepr, VideoRepr};
pub use eval::RetrievalMetrics;
pub use masking::{MaskedBatch, MaskingConfig};
pub use objective::SimilarityMatrix;
pub use tensor::{Graph, Tensor, Var};
pub use trainer::{Checkpoint, TrainConfig};
