//! Corpus generation checked against independent linear-algebra oracles, and
//! the feature store used as a training source.

use nalgebra::{DMatrix, DVector};

use modmask_core::corpus::{generate_corpus, read_store, write_store, ClipSource, GeneratorConfig, NoiseConfig, Split};
use modmask_core::trainer::{TrainConfig, Trainer};
use modmask_core::{ModalityId, Model, ModelConfig};

fn projection(m: &modmask_core::CorpusManifest, modality: ModalityId) -> DMatrix<f64> {
    let rows = m.dims.get(modality);
    DMatrix::from_row_slice(rows, m.latent_dim, m.projection(modality))
}

fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.dot(b) / (a.norm() * b.norm())
}

#[test]
fn latent_is_recoverable_from_the_rgb_stream_by_least_squares() {
    let cfg = GeneratorConfig {
        n_clips: 2000,
        ..GeneratorConfig::toy()
    };
    assert_eq!((cfg.latent_dim, cfg.rgb_dim, cfg.audio_dim, cfg.asr_dim), (16, 64, 16, 32));
    let corpus = generate_corpus(&cfg).unwrap();
    let a = projection(&corpus.manifest, ModalityId::Rgb);
    let svd = a.clone().svd(true, true);
    let mut total = 0.0;
    for r in &corpus.records {
        let t = r.rgb.len();
        let mut mean = DVector::zeros(cfg.rgb_dim);
        for i in 0..t {
            mean += DVector::from_row_slice(r.rgb.row(i));
        }
        mean /= t as f64;
        let z_hat = svd.solve(&mean, 1e-12).unwrap();
        total += cosine(&z_hat, &DVector::from_row_slice(&r.latent));
    }
    let mean_cos = total / corpus.records.len() as f64;
    assert!(mean_cos > 0.9, "mean cosine {mean_cos}");
}

#[test]
fn noiseless_streams_are_exact_functions_of_the_latent() {
    let cfg = GeneratorConfig {
        n_clips: 50,
        noise: NoiseConfig {
            rgb: 0.0,
            audio: 0.0,
            asr: 0.0,
            asr_feature: 0.0,
            asr_topic: 0.0,
            caption: 0.0,
        },
        ..GeneratorConfig::toy()
    };
    let corpus = generate_corpus(&cfg).unwrap();
    let m = &corpus.manifest;
    let codebook = DMatrix::from_row_slice(m.vocab_size, m.dims.asr, &m.codebook);
    let nearest = |u: &DVector<f64>| {
        (0..m.vocab_size)
            .min_by(|&i, &j| {
                let di = (codebook.row(i).transpose() - u).norm_squared();
                let dj = (codebook.row(j).transpose() - u).norm_squared();
                di.total_cmp(&dj)
            })
            .unwrap() as u32
    };
    for r in &corpus.records {
        let z = DVector::from_row_slice(&r.latent);
        for (modality, seq) in [(ModalityId::Rgb, &r.rgb), (ModalityId::Audio, &r.audio)] {
            let center = projection(m, modality) * &z;
            for i in 0..seq.len() {
                let row = DVector::from_row_slice(seq.row(i));
                assert!((row - &center).amax() < 1e-9, "clip {} {modality:?}", r.clip_id);
            }
        }
        // every caption word and spoken word is the codeword nearest the speech projection
        let token = nearest(&(projection(m, ModalityId::Asr) * &z));
        assert!(r.caption_tokens.iter().all(|&t| t == token), "clip {}", r.clip_id);
        for i in 0..r.asr.len() {
            assert_eq!(r.asr.row(i), codebook.row(token as usize).iter().copied().collect::<Vec<_>>().as_slice());
        }
    }
}

#[test]
fn training_from_a_store_matches_training_in_memory() {
    let corpus = generate_corpus(&GeneratorConfig {
        n_clips: 150,
        ..GeneratorConfig::toy()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.mmf");
    write_store(&corpus.manifest, &corpus.records, &path).unwrap();
    let store = read_store(&path).unwrap();
    assert_eq!(store.manifest().clip_ids, corpus.manifest.clip_ids);
    assert_eq!(store.manifest().split_ids(Split::Test), corpus.manifest.split_ids(Split::Test));

    let m = corpus.manifest();
    let model = Model::new(&ModelConfig::toy(), m.dims, &m.codebook_tensor(), 0).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        ..TrainConfig::toy_pretrain()
    };
    let pool = m.split_ids(Split::Train);
    let run = |source: &dyn ClipSource| {
        let mut t = Trainer::new(model.clone(), cfg.clone()).unwrap();
        for _ in 0..4 {
            t.step(source, &pool).unwrap();
        }
        t.model.params
    };
    assert_eq!(run(&corpus), run(&store));
}
