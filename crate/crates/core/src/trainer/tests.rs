use super::*;
use crate::corpus::{generate_corpus, Corpus, GeneratorConfig};
use crate::encoders::ModelConfig;

fn corpus() -> Corpus {
    let cfg = GeneratorConfig {
        n_clips: 80,
        latent_dim: 4,
        rgb_dim: 6,
        audio_dim: 4,
        asr_dim: 5,
        vocab_size: 24,
        ..GeneratorConfig::toy()
    };
    generate_corpus(&cfg).unwrap()
}

fn model(c: &Corpus, seed: u64) -> Model {
    let cfg = ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 12,
        vocab_size: 24,
        netvlad_clusters: 2,
        ..ModelConfig::toy()
    };
    let m = c.manifest();
    Model::new(&cfg, m.dims, &m.codebook_tensor(), seed).unwrap()
}

fn pretrain_cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 6,
        total_steps: steps,
        eval_every_steps: 5,
        lr0: 3e-3,
        val_batches: 1,
        ..TrainConfig::toy_pretrain()
    }
}

fn finetune_cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 6,
        total_steps: steps,
        eval_every_steps: 5,
        lr0: 3e-3,
        ..TrainConfig::toy_finetune()
    }
}

fn train_ids(c: &Corpus) -> Vec<u64> {
    c.manifest().split_ids(Split::Train)
}

#[test]
fn lr_schedule_examples() {
    let lr = lr_at(4000, 1e-4, 0.98, 2000);
    assert!((lr - 9.604e-5).abs() < 1e-18, "{lr}");
    assert_eq!(lr_at(0, 1e-4, 0.98, 2000), 1e-4);
    assert_eq!(lr_at(1999, 1e-4, 0.98, 2000), 1e-4);
    for step in [0, 10, 1_000_000] {
        assert_eq!(lr_at(step, 3e-3, 1.0, 7), 3e-3);
    }
    let mut prev = f64::INFINITY;
    for step in (0..100_000).step_by(997) {
        let v = lr_at(step, 1e-3, 0.9, 500);
        assert!(v <= prev);
        prev = v;
    }
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        TrainConfig { batch_size: 1, ..pretrain_cfg(1) },
        TrainConfig { lr0: 0.0, ..pretrain_cfg(1) },
        TrainConfig { decay_factor: 1.5, ..pretrain_cfg(1) },
        TrainConfig { decay_every_steps: 0, ..pretrain_cfg(1) },
    ] {
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))), "{bad:?}");
    }
}

#[test]
fn training_is_deterministic() {
    let c = corpus();
    let ids = train_ids(&c);
    let run = || {
        let mut t = Trainer::new(model(&c, 1), pretrain_cfg(6)).unwrap();
        for _ in 0..6 {
            t.step(&c, &ids).unwrap();
        }
        t
    };
    let (a, b) = (run(), run());
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.adam, b.adam);
    assert_eq!(a.log, b.log);
}

#[test]
fn speech_only_supervision_never_touches_video_speech_inputs() {
    let c = corpus();
    let ids = train_ids(&c);
    let mut cfg = pretrain_cfg(8);
    cfg.masking.p = 1.0;
    let m = model(&c, 2);
    let before = m.params.clone();
    let mut t = Trainer::new(m, cfg).unwrap();
    for _ in 0..8 {
        t.step(&c, &ids).unwrap();
    }
    assert!(t.log.objectives.iter().all(|o| *o == ModalityId::Asr));
    for (id, name, value) in t.model.params.iter() {
        let speech_input = name.starts_with("psi.asr.") || name.starts_with("psi.geu.asr.");
        if speech_input {
            assert!(!t.touched()[id.index()], "{name} received a gradient");
            assert_eq!(value, before.get(id), "{name} changed");
        }
        if name.starts_with("psi.layer") {
            assert!(t.touched()[id.index()], "{name} never trained");
        }
    }
}

#[test]
fn mixed_supervision_trains_every_video_input() {
    let c = corpus();
    let ids = train_ids(&c);
    let mut cfg = pretrain_cfg(30);
    cfg.masking.p = 0.34;
    let mut t = Trainer::new(model(&c, 3), cfg).unwrap();
    for _ in 0..30 {
        t.step(&c, &ids).unwrap();
    }
    for (id, name, _) in t.model.params.iter() {
        if name.starts_with("psi.") && name != "psi.temporal" {
            assert!(t.touched()[id.index()], "{name} never trained");
        }
    }
}

#[test]
fn pretraining_loss_decreases() {
    let c = corpus();
    let out = pretrain(&c, model(&c, 4), &pretrain_cfg(60)).unwrap();
    let l = &out.trainer.log.losses;
    let head: f64 = l[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = l[l.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "loss {head} -> {tail}");
    assert_eq!(out.trainer.log.val.len(), 12);
}

#[test]
fn resume_reproduces_the_uninterrupted_run_bit_exactly() {
    let c = corpus();
    let ids = train_ids(&c);
    let cfg = pretrain_cfg(10);
    let mut straight = Trainer::new(model(&c, 5), cfg.clone()).unwrap();
    for _ in 0..10 {
        straight.step(&c, &ids).unwrap();
    }
    let mut first = Trainer::new(model(&c, 5), cfg.clone()).unwrap();
    for _ in 0..5 {
        first.step(&c, &ids).unwrap();
    }
    let bytes = first.checkpoint().to_bytes();
    drop(first);
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    let mut resumed = Trainer::resume(&ckpt, Some(&fingerprint(&ckpt.model_config, &cfg)), false).unwrap();
    assert_eq!(resumed.step, 5);
    for _ in 0..5 {
        resumed.step(&c, &ids).unwrap();
    }
    assert_eq!(resumed.model.params, straight.model.params);
    assert_eq!(resumed.adam, straight.adam);
    assert_eq!(resumed.log.losses[..], straight.log.losses[5..]);
}

#[test]
fn checkpoint_round_trips_through_a_file() {
    let c = corpus();
    let ids = train_ids(&c);
    let mut t = Trainer::new(model(&c, 6), pretrain_cfg(3)).unwrap();
    for _ in 0..3 {
        t.step(&c, &ids).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    let ckpt = t.checkpoint();
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes(), ckpt.to_bytes());
    assert_eq!(back.params, t.model.params);
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(Checkpoint::from_bytes(&bytes).is_err());
}

#[test]
fn fingerprint_mismatch_is_refused_unless_forced() {
    let c = corpus();
    let t = Trainer::new(model(&c, 7), pretrain_cfg(3)).unwrap();
    let ckpt = t.checkpoint();
    let other = fingerprint(&t.model.cfg, &TrainConfig { lr0: 1.0, ..pretrain_cfg(3) });
    assert_ne!(other, ckpt.fingerprint);
    assert!(matches!(Trainer::resume(&ckpt, Some(&other), false), Err(TrainError::Fingerprint { .. })));
    assert!(Trainer::resume(&ckpt, Some(&other), true).is_ok());
    let mut tampered = ckpt.clone();
    tampered.train_config.margin = 0.3;
    assert!(matches!(Trainer::resume(&tampered, None, false), Err(TrainError::Fingerprint { .. })));
}

#[test]
fn frozen_query_side_gets_no_gradients() {
    let c = corpus();
    let ids = train_ids(&c);
    let cfg = TrainConfig {
        freeze_query: true,
        ..finetune_cfg(4)
    };
    let m = model(&c, 8);
    let before = m.params.clone();
    let mut t = Trainer::new(m, cfg).unwrap();
    for _ in 0..4 {
        t.step(&c, &ids).unwrap();
    }
    for (id, name, value) in t.model.params.iter() {
        if name.starts_with("phi.") || name.starts_with("cap.") {
            assert!(!t.touched()[id.index()], "{name} received a gradient");
            assert_eq!(value, before.get(id), "{name} changed");
        } else if name.starts_with("psi.layer") {
            assert!(t.touched()[id.index()], "{name} never trained");
        }
    }
}

#[test]
fn finetuning_selects_the_best_validation_step() {
    let c = corpus();
    let out = finetune(&c, model(&c, 9), &finetune_cfg(12)).unwrap();
    let best = out.best_step.unwrap();
    let best_gm = out.best_val.unwrap().geometric_mean();
    let vals = &out.trainer.log.val;
    assert_eq!(vals.iter().map(|v| v.step).collect::<Vec<_>>(), vec![5, 10, 12]);
    assert!(vals.iter().all(|v| v.value <= best_gm));
    assert_eq!(vals.iter().find(|v| v.step == best).unwrap().value, best_gm);
}

#[test]
fn phases_are_checked() {
    let c = corpus();
    assert!(matches!(pretrain(&c, model(&c, 10), &finetune_cfg(1)), Err(TrainError::Config(_))));
    assert!(matches!(finetune(&c, model(&c, 10), &pretrain_cfg(1)), Err(TrainError::Config(_))));
}
