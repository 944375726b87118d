//! Retrieval metrics, evaluation of trained models, ablation runners and
//! CSV / plain-text reports.

mod ablation;
mod metrics;
mod report;

pub use ablation::{ablate, AblationKind, Experiment, RunSpec};
pub use metrics::{
    compute_metrics, geometric_mean_selection, median, metrics_from_ranks, rank_of_truth, RetrievalMetrics,
};
pub use report::{
    mean_std, read_results_csv, render_table_txt, summarize, write_report, write_results_csv, ResultRow, SummaryRow,
    CSV_HEADER,
};

use thiserror::Error;

use crate::corpus::{crop_for_eval, ClipSource, CorpusError, CropConfig};
use crate::encoders::{EncoderError, ModalityId, Model, MODALITIES};
use crate::objective::{similarity_matrix, ObjectiveError, SimilarityMatrix};
use crate::trainer::TrainError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no queries or candidates to evaluate")]
    Empty,
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] Box<TrainError>),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<TrainError> for EvalError {
    fn from(e: TrainError) -> Self {
        Self::Train(Box::new(e))
    }
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Caption-to-video similarity over the clips `ids`, each cropped
/// deterministically. The video encoder sees only `modalities`.
pub fn split_similarity(
    model: &Model,
    source: &dyn ClipSource,
    ids: &[u64],
    crop: &CropConfig,
    modalities: [bool; 3],
) -> Result<SimilarityMatrix> {
    if ids.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut queries = Vec::with_capacity(ids.len());
    let mut videos = Vec::with_capacity(ids.len());
    for &id in ids {
        let clip = crop_for_eval(&*source.clip(id)?, crop);
        queries.push(model.caption_repr(&clip.caption)?);
        let streams = MODALITIES.map(|m| modalities[m.index()].then(|| clip.stream(m)));
        videos.push(model.video_repr(streams)?);
    }
    Ok(similarity_matrix(&queries, &videos)?)
}

/// Text-to-video metrics over the clips `ids`.
pub fn evaluate_split(
    model: &Model,
    source: &dyn ClipSource,
    ids: &[u64],
    crop: &CropConfig,
    modalities: [bool; 3],
) -> Result<RetrievalMetrics> {
    compute_metrics(&split_similarity(model, source, ids, crop, modalities)?)
}

/// Retrieval with the video encoder restricted to one modality.
pub fn single_modality_eval(
    model: &Model,
    source: &dyn ClipSource,
    ids: &[u64],
    crop: &CropConfig,
    modality: ModalityId,
) -> Result<RetrievalMetrics> {
    let mut mask = [false; 3];
    mask[modality.index()] = true;
    evaluate_split(model, source, ids, crop, mask)
}
