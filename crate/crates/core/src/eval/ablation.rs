use std::cell::RefCell;
use std::collections::HashMap;

use log::info;

use super::{evaluate_split, EvalError, Result, ResultRow, RetrievalMetrics};
use crate::corpus::{ClipSource, Split};
use crate::encoders::{ModalityId, Model, ModelConfig, MODALITIES};
use crate::trainer::{crop_config, finetune, pretrain, Phase, TrainConfig, TrainLog, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    /// Speech-masking probability sweep.
    PSweep,
    /// Fraction of supervising tokens moved to the query encoder.
    PartialMask,
    /// Retrieval with the video encoder restricted to each modality.
    SingleModality,
}

impl AblationKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "p_sweep" => Some(Self::PSweep),
            "partial_mask" => Some(Self::PartialMask),
            "single_modality" => Some(Self::SingleModality),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::PSweep => "p_sweep",
            Self::PartialMask => "partial_mask",
            Self::SingleModality => "single_modality",
        }
    }
}

/// One pre-train (optional) + caption-training + test evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    /// `None` trains on captions from scratch.
    pub p: Option<f64>,
    pub mask_fraction: f64,
    pub seed: u64,
    /// Modalities the video encoder sees during caption training and test.
    pub modalities: Vec<ModalityId>,
}

impl RunSpec {
    pub fn pretrained(p: f64, mask_fraction: f64, seed: u64) -> Self {
        Self {
            p: Some(p),
            mask_fraction,
            seed,
            modalities: MODALITIES.to_vec(),
        }
    }

    pub fn scratch(seed: u64) -> Self {
        Self {
            p: None,
            mask_fraction: 1.0,
            seed,
            modalities: MODALITIES.to_vec(),
        }
    }

    pub fn only(mut self, m: ModalityId) -> Self {
        self.modalities = vec![m];
        self
    }

    pub fn modality_label(&self) -> String {
        if self.modalities.len() == 3 {
            "all".into()
        } else {
            self.modalities.iter().map(|m| m.name()).collect::<Vec<_>>().join("+")
        }
    }
}

type PretrainKey = (u64, u64, u64);

/// Data and configuration shared by the runs of an experiment. Pre-trained
/// models are cached per (p, mask fraction, seed).
pub struct Experiment<'a> {
    pub pretrain_data: &'a dyn ClipSource,
    pub data: &'a dyn ClipSource,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    cache: RefCell<HashMap<PretrainKey, (Model, TrainLog)>>,
}

impl<'a> Experiment<'a> {
    pub fn new(
        pretrain_data: &'a dyn ClipSource,
        data: &'a dyn ClipSource,
        model: ModelConfig,
        pretrain: TrainConfig,
        finetune: TrainConfig,
    ) -> Self {
        Self {
            pretrain_data,
            data,
            model,
            pretrain,
            finetune,
            cache: RefCell::new(HashMap::new()),
        }
    }

    /// Fresh model for `seed`, with caption embeddings from the downstream codebook.
    pub fn init_model(&self, seed: u64) -> Result<Model> {
        let m = self.data.manifest();
        Ok(Model::new(&self.model, m.dims, &m.codebook_tensor(), seed)?)
    }

    pub fn pretrain_config(&self, p: f64, mask_fraction: f64, seed: u64) -> TrainConfig {
        let mut cfg = self.pretrain.clone();
        cfg.phase = Phase::Pretrain;
        cfg.seed = seed;
        cfg.masking.p = p;
        cfg.masking.mask_fraction = mask_fraction;
        cfg.masking.seed = seed;
        cfg
    }

    /// Pre-trained model and its training log, computed once per key.
    pub fn pretrained(&self, p: f64, mask_fraction: f64, seed: u64) -> Result<(Model, TrainLog)> {
        let key = (p.to_bits(), mask_fraction.to_bits(), seed);
        if let Some(hit) = self.cache.borrow().get(&key) {
            return Ok(hit.clone());
        }
        info!("pre-training p={p} f={mask_fraction} seed={seed}");
        let cfg = self.pretrain_config(p, mask_fraction, seed);
        let out = pretrain(self.pretrain_data, self.init_model(seed)?, &cfg)?;
        let entry = (out.model, out.trainer.log);
        self.cache.borrow_mut().insert(key, entry.clone());
        Ok(entry)
    }

    pub fn finetune_config(&self, spec: &RunSpec) -> TrainConfig {
        let mut cfg = self.finetune.clone();
        cfg.phase = if spec.p.is_some() { Phase::Finetune } else { Phase::Scratch };
        cfg.seed = spec.seed;
        cfg.modalities = spec.modalities.clone();
        cfg
    }

    /// Caption training (after pre-training when `spec.p` is set).
    pub fn finetuned(&self, spec: &RunSpec) -> Result<TrainOutcome> {
        let init = match spec.p {
            Some(p) => self.pretrained(p, spec.mask_fraction, spec.seed)?.0,
            None => self.init_model(spec.seed)?,
        };
        Ok(finetune(self.data, init, &self.finetune_config(spec))?)
    }

    /// Test-split metrics with the video encoder restricted to `modalities`.
    pub fn test_metrics(&self, model: &Model, modalities: &[ModalityId]) -> Result<RetrievalMetrics> {
        let ids = self.data.manifest().split_ids(Split::Test);
        let crop = crop_config(&model.cfg, self.finetune.crop_s);
        let mask = MODALITIES.map(|m| modalities.contains(&m));
        evaluate_split(model, self.data, &ids, &crop, mask)
    }

    /// Full run, reported as one results row.
    pub fn run(&self, spec: &RunSpec) -> Result<ResultRow> {
        let out = self.finetuned(spec)?;
        let m = self.test_metrics(&out.model, &spec.modalities)?;
        let phase = if spec.p.is_some() { "finetune" } else { "scratch" };
        let mf = spec.p.map(|_| spec.mask_fraction);
        info!(
            "{phase} p={:?} f={mf:?} {} seed={}: test R@10 {:.3}",
            spec.p,
            spec.modality_label(),
            spec.seed,
            m.r10
        );
        Ok(ResultRow::new(phase, spec.p, mf, &spec.modality_label(), spec.seed, &m))
    }
}

/// Runs an ablation grid over `seeds`. `PSweep` and `SingleModality` read
/// the grid as speech-masking probabilities (mask fraction from the base
/// pre-training config); `PartialMask` reads it as mask fractions (p from
/// the base config). `SingleModality` emits, per grid point and seed, the
/// all-modality run followed by one run per modality.
pub fn ablate(exp: &Experiment, kind: AblationKind, grid: &[f64], seeds: &[u64]) -> Result<Vec<ResultRow>> {
    if grid.is_empty() {
        return Err(EvalError::Config(format!("ablation {}: empty grid", kind.name())));
    }
    if seeds.is_empty() {
        return Err(EvalError::Config(format!("ablation {}: no seeds", kind.name())));
    }
    let mut rows = Vec::new();
    let base_p = exp.pretrain.masking.p;
    let base_f = exp.pretrain.masking.mask_fraction;
    for &g in grid {
        for &seed in seeds {
            match kind {
                AblationKind::PSweep => rows.push(exp.run(&RunSpec::pretrained(g, base_f, seed))?),
                AblationKind::PartialMask => rows.push(exp.run(&RunSpec::pretrained(base_p, g, seed))?),
                AblationKind::SingleModality => {
                    rows.push(exp.run(&RunSpec::pretrained(g, base_f, seed))?);
                    for m in MODALITIES {
                        rows.push(exp.run(&RunSpec::pretrained(g, base_f, seed).only(m))?);
                    }
                }
            }
        }
    }
    Ok(rows)
}
