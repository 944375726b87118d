//! Per-batch choice of the supervising modality and the split of each clip
//! into query-side tokens (for Φ) and video-side tokens (for Ψ).

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ClipSample, Stream};
use crate::encoders::{ModalityId, MODALITIES};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MaskingError {
    #[error("invalid masking config: {0}")]
    Config(String),
    #[error("clip {clip_id} has no {modality} tokens to supervise with")]
    EmptySupervising { clip_id: u64, modality: ModalityId },
}

pub type Result<T> = std::result::Result<T, MaskingError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingConfig {
    /// Probability that speech supervises a batch; RGB and audio share the rest equally.
    pub p: f64,
    /// Fraction of the supervising stream moved from Ψ to Φ.
    pub mask_fraction: f64,
    pub seed: u64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            p: 0.8,
            mask_fraction: 1.0,
            seed: 0,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(MaskingError::Config(format!("masking.p = {} not in [0, 1]", self.p)));
        }
        check_fraction(self.mask_fraction)
    }

    /// Objective probabilities in modality order (RGB, audio, speech).
    pub fn probabilities(&self) -> [f64; 3] {
        let rest = (1.0 - self.p) / 2.0;
        [rest, rest, self.p]
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(MaskingError::Config(format!("masking.mask_fraction = {f} not in (0, 1]")))
    }
}

/// Speech with probability `p`, RGB and audio each with `(1 - p) / 2`.
pub fn sample_objective(rng: &mut ChaCha8Rng, cfg: &MaskingConfig) -> ModalityId {
    let u: f64 = rng.random();
    let rest = (1.0 - cfg.p) / 2.0;
    if u < cfg.p {
        ModalityId::Asr
    } else if u < cfg.p + rest {
        ModalityId::Rgb
    } else {
        ModalityId::Audio
    }
}

/// One clip after masking.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedClip {
    pub clip_id: u64,
    /// Supervising-modality tokens handed to Φ.
    pub query: Stream,
    /// Streams handed to Ψ; `None` for a fully masked modality.
    pub video: [Option<Stream>; 3],
    /// Positions (in the clip's supervising stream) held by Φ and by Ψ.
    pub query_rows: Vec<usize>,
    pub video_rows: Vec<usize>,
}

impl MaskedClip {
    pub fn present(&self) -> [bool; 3] {
        self.video.each_ref().map(|s| s.as_ref().is_some_and(|s| !s.is_empty()))
    }

    pub fn video_streams(&self) -> [Option<&Stream>; 3] {
        self.video.each_ref().map(Option::as_ref)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub supervising: ModalityId,
    pub clips: Vec<MaskedClip>,
}

/// Moves a uniform random subset of `⌈f·len⌉` supervising tokens of every
/// clip to Φ; Ψ keeps the rest plus the two collaborating streams untouched.
pub fn build_masked_batch(raw: &[ClipSample], supervising: ModalityId, f: f64, rng: &mut ChaCha8Rng) -> Result<MaskedBatch> {
    check_fraction(f)?;
    let mut clips = Vec::with_capacity(raw.len());
    for c in raw {
        let s = c.stream(supervising);
        let n = s.len();
        if n == 0 {
            return Err(MaskingError::EmptySupervising {
                clip_id: c.clip_id,
                modality: supervising,
            });
        }
        let k = ((f * n as f64).ceil() as usize).clamp(1, n);
        let (query_rows, video_rows) = if k == n {
            ((0..n).collect(), Vec::new())
        } else {
            let mut picked = index::sample(rng, n, k).into_vec();
            picked.sort_unstable();
            let mut keep = vec![true; n];
            picked.iter().for_each(|&i| keep[i] = false);
            let rest = (0..n).filter(|&i| keep[i]).collect();
            (picked, rest)
        };
        let video = MODALITIES.map(|m| {
            if m == supervising {
                (!video_rows.is_empty()).then(|| s.select(&video_rows))
            } else {
                Some(c.stream(m).clone())
            }
        });
        clips.push(MaskedClip {
            clip_id: c.clip_id,
            query: s.select(&query_rows),
            video,
            query_rows,
            video_rows,
        });
    }
    Ok(MaskedBatch { supervising, clips })
}
