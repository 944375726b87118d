//! Pre-training and fine-tuning loops, Adam, learning-rate decay,
//! checkpointing and validation-driven model selection.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{sample_batch, ClipSample, ClipSource, CorpusError, CropConfig, Split};
use crate::encoders::{EncoderError, ModalityId, Model, ModelConfig, Session, MODALITIES};
use crate::eval::{evaluate_split, EvalError, RetrievalMetrics};
use crate::masking::{build_masked_batch, sample_objective, MaskedBatch, MaskingConfig, MaskingError};
use crate::objective::{mixture_similarity, ranking_loss, ObjectiveError};
use crate::tensor::{TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient {value} for parameter {param}")]
    NonFiniteGradient { param: String, value: f64 },
    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: u64, value: f64 },
    #[error("config fingerprint {found} does not match checkpoint {expected}")]
    Fingerprint { expected: String, found: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Masking(#[from] MaskingError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] Box<EvalError>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Masked-modality pre-training (speech query when `p = 1`).
    Pretrain,
    /// Caption training starting from a pre-trained model.
    Finetune,
    /// Caption training from a fresh initialization.
    Scratch,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::Finetune => "finetune",
            Self::Scratch => "scratch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every_steps: u64,
    pub total_steps: u64,
    pub margin: f64,
    /// Used by the pre-training phase only.
    pub masking: MaskingConfig,
    pub seed: u64,
    pub eval_every_steps: u64,
    /// Crop length in seconds for training clips.
    pub crop_s: u32,
    /// Caption phases: train only the video side.
    pub freeze_query: bool,
    /// Caption phases: modalities shown to the video encoder.
    pub modalities: Vec<ModalityId>,
    /// Pre-training: validation batches averaged at each evaluation.
    pub val_batches: usize,
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn toy_pretrain() -> Self {
        Self {
            phase: Phase::Pretrain,
            batch_size: 32,
            lr0: 1e-3,
            decay_factor: 0.98,
            decay_every_steps: 100,
            total_steps: 1000,
            margin: 0.05,
            masking: MaskingConfig::default(),
            seed: 0,
            eval_every_steps: 100,
            crop_s: 10,
            freeze_query: false,
            modalities: MODALITIES.to_vec(),
            val_batches: 2,
            adam: AdamConfig::default(),
        }
    }

    pub fn toy_finetune() -> Self {
        Self {
            phase: Phase::Finetune,
            lr0: 5e-4,
            decay_factor: 0.95,
            decay_every_steps: 100,
            total_steps: 500,
            ..Self::toy_pretrain()
        }
    }

    /// Large-scale pre-training hyperparameters (batch 1,200, lr 1e-4
    /// decayed by 0.98 every 2K steps, 400K steps, margin 0.05).
    pub fn reference_pretrain() -> Self {
        Self {
            batch_size: 1200,
            lr0: 1e-4,
            decay_factor: 0.98,
            decay_every_steps: 2000,
            total_steps: 400_000,
            crop_s: 30,
            eval_every_steps: 2000,
            ..Self::toy_pretrain()
        }
    }

    /// Caption training hyperparameters (batch 32, lr 5e-5 decayed by 0.95
    /// every 1K steps, 50K steps, margin 0.05).
    pub fn reference_finetune() -> Self {
        Self {
            phase: Phase::Finetune,
            batch_size: 32,
            lr0: 5e-5,
            decay_factor: 0.95,
            decay_every_steps: 1000,
            total_steps: 50_000,
            crop_s: 30,
            eval_every_steps: 1000,
            ..Self::toy_pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 = {} must be > 0", self.lr0));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor = {} not in (0, 1]", self.decay_factor));
        }
        if self.decay_every_steps == 0 || self.eval_every_steps == 0 {
            return bad("decay_every_steps and eval_every_steps must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size = {} must be >= 2", self.batch_size));
        }
        if !(self.margin >= 0.0) {
            return bad(format!("margin = {} must be >= 0", self.margin));
        }
        if self.crop_s == 0 {
            return bad("crop_s must be >= 1".into());
        }
        if self.modalities.is_empty() {
            return bad("modalities must name at least one modality".into());
        }
        self.masking.validate()?;
        Ok(())
    }

    pub fn modality_mask(&self) -> [bool; 3] {
        MODALITIES.map(|m| self.modalities.contains(&m))
    }
}

/// `lr0 · factor^⌊step / every⌋`.
pub fn lr_at(step: u64, lr0: f64, decay_factor: f64, decay_every_steps: u64) -> f64 {
    let k = step / decay_every_steps.max(1);
    lr0 * decay_factor.powi(k.min(i32::MAX as u64) as i32)
}

/// Hex SHA-256 over the canonical JSON of the model and training configs.
pub fn fingerprint(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model).expect("model config serializes"));
    h.update([0u8]);
    h.update(serde_json::to_vec(train).expect("train config serializes"));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn crop_config(model: &ModelConfig, crop_s: u32) -> CropConfig {
    CropConfig {
        crop_s,
        caps: model.caps,
        caption_window: model.caption_window,
    }
}

/// Ranking loss of a masked pre-training batch: Φ encodes each clip's
/// supervising tokens, Ψ the rest.
pub fn pretrain_batch_loss(model: &Model, s: &mut Session, batch: &MaskedBatch, margin: f64) -> Result<Var> {
    let mut qs = Vec::with_capacity(batch.clips.len());
    let mut vs = Vec::with_capacity(batch.clips.len());
    for c in &batch.clips {
        qs.push(model.encode_query_pretrain(s, batch.supervising, &c.query)?);
        vs.push(model.encode_video(s, c.video_streams())?);
    }
    batch_loss(s, &qs, &vs, margin)
}

/// Ranking loss of a caption batch; Ψ sees only the `modalities` set.
pub fn caption_batch_loss(model: &Model, s: &mut Session, clips: &[ClipSample], modalities: [bool; 3], margin: f64) -> Result<Var> {
    let mut qs = Vec::with_capacity(clips.len());
    let mut vs = Vec::with_capacity(clips.len());
    for c in clips {
        qs.push(model.encode_query_caption(s, &c.caption)?);
        let streams = MODALITIES.map(|m| modalities[m.index()].then(|| c.stream(m)));
        vs.push(model.encode_video(s, streams)?);
    }
    batch_loss(s, &qs, &vs, margin)
}

fn batch_loss(s: &mut Session, qs: &[crate::encoders::QueryOut], vs: &[crate::encoders::VideoOut], margin: f64) -> Result<Var> {
    let q = Model::stack_queries(s, qs)?;
    let v = Model::stack_videos(s, vs)?;
    let scores = mixture_similarity(&mut s.graph, q.parts, q.weights, v.parts)?;
    Ok(ranking_loss(&mut s.graph, scores, margin)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValPoint {
    pub step: u64,
    /// Mean validation loss (pre-training) or geometric-mean recall (captions).
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub objectives: Vec<ModalityId>,
    pub val: Vec<ValPoint>,
}

const DROPOUT_SALT: u64 = 0x6472_6f70_6f75_7421;
const VAL_SALT: u64 = 0x7661_6c69_6461_7465;

/// Mutable training state over one model.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub adam: AdamState,
    pub step: u64,
    pub log: TrainLog,
    rng: ChaCha8Rng,
    trainable: Vec<bool>,
    touched: Vec<bool>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(&model.params);
        let freeze = cfg.freeze_query && cfg.phase != Phase::Pretrain;
        let trainable = model.trainable_mask(freeze);
        let touched = vec![false; model.params.len()];
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            model,
            cfg,
            adam,
            step: 0,
            log: TrainLog::default(),
            trainable,
            touched,
        })
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.model.cfg, &self.cfg)
    }

    /// Parameters that have received a gradient in any step so far.
    pub fn touched(&self) -> &[bool] {
        &self.touched
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    pub fn lr(&self) -> f64 {
        lr_at(self.step, self.cfg.lr0, self.cfg.decay_factor, self.cfg.decay_every_steps)
    }

    fn crop(&self) -> CropConfig {
        crop_config(&self.model.cfg, self.cfg.crop_s)
    }

    fn dropout_rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ DROPOUT_SALT);
        r.set_stream(self.step);
        r
    }

    /// Draws a batch and builds the step's loss inside `s`, drawing from `rng`.
    fn build_loss(
        model: &Model,
        cfg: &TrainConfig,
        crop: &CropConfig,
        s: &mut Session,
        source: &dyn ClipSource,
        pool: &[u64],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Option<ModalityId>)> {
        let raw = sample_batch(source, pool, cfg.batch_size, crop, rng)?;
        match cfg.phase {
            Phase::Pretrain => {
                let sup = sample_objective(rng, &cfg.masking);
                let kept: Vec<ClipSample> = raw.into_iter().filter(|c| !c.stream(sup).is_empty()).collect();
                if kept.len() < cfg.batch_size {
                    debug!("dropped {} clips without {sup} tokens", cfg.batch_size - kept.len());
                }
                if kept.len() < 2 {
                    return Err(CorpusError::InsufficientData {
                        requested: 2,
                        available: kept.len(),
                    }
                    .into());
                }
                let mut batch = build_masked_batch(&kept, sup, cfg.masking.mask_fraction, rng)?;
                if sup == ModalityId::Asr {
                    let w = model.cfg.query_asr_window;
                    for c in &mut batch.clips {
                        if c.query.len() > w {
                            let start = rng.random_range(0..=c.query.len() - w);
                            c.query = c.query.range(start, start + w);
                        }
                    }
                }
                Ok((pretrain_batch_loss(model, s, &batch, cfg.margin)?, Some(sup)))
            }
            Phase::Finetune | Phase::Scratch => {
                let mask = cfg.modality_mask();
                let kept: Vec<ClipSample> = raw
                    .into_iter()
                    .filter(|c| MODALITIES.iter().any(|m| mask[m.index()] && !c.stream(*m).is_empty()))
                    .collect();
                if kept.len() < 2 {
                    return Err(CorpusError::InsufficientData {
                        requested: 2,
                        available: kept.len(),
                    }
                    .into());
                }
                Ok((caption_batch_loss(model, s, &kept, mask, cfg.margin)?, None))
            }
        }
    }

    /// One optimization step on clips drawn from `pool`. Returns the loss.
    pub fn step(&mut self, source: &dyn ClipSource, pool: &[u64]) -> Result<f64> {
        let lr = self.lr();
        let crop = self.crop();
        let (value, grads, objective) = {
            let mut s = Session::train(&self.model.params, Some(&self.trainable), self.model.cfg.dropout, self.dropout_rng());
            let (loss, objective) = Self::build_loss(&self.model, &self.cfg, &crop, &mut s, source, pool, &mut self.rng)?;
            let value = s.graph.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { step: self.step, value });
            }
            s.graph.backward(loss)?;
            (value, s.param_grads(), objective)
        };
        for (t, g) in self.touched.iter_mut().zip(&grads) {
            *t |= g.is_some();
        }
        adam_step(&mut self.model.params, &grads, &mut self.adam, lr, &self.cfg.adam)?;
        self.step += 1;
        self.log.losses.push(value);
        if let Some(o) = objective {
            self.log.objectives.push(o);
        }
        Ok(value)
    }

    /// Mean pre-training loss over fixed validation batches. Uses its own rng,
    /// so it never perturbs the training trajectory.
    pub fn validation_loss(&self, source: &dyn ClipSource, pool: &[u64]) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ VAL_SALT);
        let crop = self.crop();
        let n = self.cfg.val_batches.max(1);
        let mut cfg = self.cfg.clone();
        cfg.batch_size = cfg.batch_size.min(pool.len());
        let mut total = 0.0;
        for _ in 0..n {
            let mut s = Session::eval(&self.model.params);
            let (loss, _) = Self::build_loss(&self.model, &cfg, &crop, &mut s, source, pool, &mut rng)?;
            total += s.graph.value(loss).item();
        }
        Ok(total / n as f64)
    }

    /// Writes the full training state.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            fingerprint: self.fingerprint(),
            model_config: self.model.cfg.clone(),
            dims: self.model.dims,
            train_config: self.cfg.clone(),
            params: self.model.params.clone(),
            adam: self.adam.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    /// Restores training state. `expected` is the fingerprint of the configs
    /// the caller intends to continue with; a mismatch is refused unless `force`.
    pub fn resume(ckpt: &Checkpoint, expected: Option<&str>, force: bool) -> Result<Self> {
        let actual = fingerprint(&ckpt.model_config, &ckpt.train_config);
        if actual != ckpt.fingerprint && !force {
            return Err(TrainError::Fingerprint {
                expected: ckpt.fingerprint.clone(),
                found: actual,
            });
        }
        if let Some(e) = expected {
            if e != ckpt.fingerprint && !force {
                return Err(TrainError::Fingerprint {
                    expected: ckpt.fingerprint.clone(),
                    found: e.to_string(),
                });
            }
        }
        let model = Model::from_params(&ckpt.model_config, ckpt.dims, &ckpt.params)?;
        let mut t = Self::new(model, ckpt.train_config.clone())?;
        if ckpt.adam.m.len() != t.model.params.len() {
            return Err(TrainError::Checkpoint("optimizer state does not match the parameters".into()));
        }
        t.adam = ckpt.adam.clone();
        t.step = ckpt.step;
        t.rng = ckpt.rng.restore();
        Ok(t)
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final model (pre-training) or the validation-selected model (captions).
    pub model: Model,
    pub trainer: Trainer,
    pub best_step: Option<u64>,
    pub best_val: Option<RetrievalMetrics>,
}

fn pool(source: &dyn ClipSource, split: Split) -> Vec<u64> {
    source.manifest().split_ids(split)
}

/// Runs `trainer` up to `until` steps of masked pre-training on the train
/// split, logging validation loss every `eval_every_steps`.
pub fn run_pretrain(trainer: &mut Trainer, source: &dyn ClipSource, until: u64) -> Result<()> {
    let train = pool(source, Split::Train);
    let val = pool(source, Split::Val);
    while trainer.step < until {
        let loss = trainer.step(source, &train)?;
        if trainer.step % trainer.cfg.eval_every_steps == 0 && val.len() >= 2 {
            let v = trainer.validation_loss(source, &val)?;
            trainer.log.val.push(ValPoint {
                step: trainer.step,
                value: v,
            });
            info!("pretrain step {} loss {loss:.4} val {v:.4} lr {:.3e}", trainer.step, trainer.lr());
        }
    }
    Ok(())
}

/// Masked-modality pre-training from `model` for `cfg.total_steps` steps.
pub fn pretrain(source: &dyn ClipSource, model: Model, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.phase != Phase::Pretrain {
        return Err(TrainError::Config(format!("pretrain called with phase {}", cfg.phase.name())));
    }
    let mut t = Trainer::new(model, cfg.clone())?;
    run_pretrain(&mut t, source, cfg.total_steps)?;
    Ok(TrainOutcome {
        model: t.model.clone(),
        trainer: t,
        best_step: None,
        best_val: None,
    })
}

/// Caption training with validation-driven selection: the returned model is
/// the one with the highest validation geometric mean of R@1/R@5/R@10.
pub fn finetune(source: &dyn ClipSource, model: Model, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.phase == Phase::Pretrain {
        return Err(TrainError::Config("finetune called with phase pretrain".into()));
    }
    let mut t = Trainer::new(model, cfg.clone())?;
    let train = pool(source, Split::Train);
    let val = pool(source, Split::Val);
    let crop = crop_config(&t.model.cfg, cfg.crop_s);
    let modalities = cfg.modality_mask();
    let mut best: Option<(f64, u64, RetrievalMetrics, Model)> = None;
    while t.step < cfg.total_steps {
        t.step(source, &train)?;
        if t.step % cfg.eval_every_steps == 0 || t.step == cfg.total_steps {
            let m = evaluate_split(&t.model, source, &val, &crop, modalities).map_err(Box::new)?;
            let gm = m.geometric_mean();
            t.log.val.push(ValPoint { step: t.step, value: gm });
            info!(
                "{} step {} loss {:.4} val R@1 {:.3} R@5 {:.3} R@10 {:.3} gm {gm:.4}",
                cfg.phase.name(),
                t.step,
                t.log.losses.last().copied().unwrap_or(f64::NAN),
                m.r1,
                m.r5,
                m.r10
            );
            if best.as_ref().is_none_or(|(b, ..)| gm > *b) {
                best = Some((gm, t.step, m, t.model.clone()));
            }
        }
    }
    let (best_step, best_val, model) = match best {
        Some((_, step, m, model)) => (Some(step), Some(m), model),
        None => (None, None, t.model.clone()),
    };
    Ok(TrainOutcome {
        model,
        trainer: t,
        best_step,
        best_val,
    })
}

#[cfg(test)]
mod tests;
