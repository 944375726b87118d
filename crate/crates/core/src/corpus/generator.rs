use std::borrow::Cow;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClipRecord, ClipSource, CorpusError, CorpusManifest, Dims, FeatureSeq, Result, Split};
use crate::encoders::ModalityId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub rgb: f64,
    pub audio: f64,
    /// Jitter on the latent projection before each ASR word is quantized.
    pub asr: f64,
    /// Jitter added to the codebook embedding of each ASR word.
    pub asr_feature: f64,
    /// Spread of a per-clip offset shared by all of a clip's ASR words:
    /// speaker and topic drift that is consistent within a clip but absent
    /// from the visual streams and the caption.
    pub asr_topic: f64,
    /// Jitter on the latent projection before each caption word is quantized.
    pub caption: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_clips: usize,
    pub latent_dim: usize,
    pub rgb_dim: usize,
    pub audio_dim: usize,
    pub asr_dim: usize,
    pub vocab_size: usize,
    pub noise: NoiseConfig,
    pub caption_len_min: usize,
    pub caption_len_max: usize,
    pub duration_min: u32,
    pub duration_max: u32,
    /// Probabilities of 0, 1 and 2 ASR words in a spoken second.
    pub words_per_second: [f64; 3],
    /// Zero the audio and drop ASR words over shared silent segments.
    pub silence_alignment: bool,
    /// Fraction of seconds that are silent when `silence_alignment` is on.
    pub silence_fraction: f64,
    /// Seed of the projection matrices and codebook, shared by corpora of one world.
    pub world_seed: u64,
    /// Seed of the clip draws.
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn toy() -> Self {
        Self {
            n_clips: 2500,
            latent_dim: 16,
            rgb_dim: 64,
            audio_dim: 16,
            asr_dim: 32,
            vocab_size: 256,
            noise: NoiseConfig {
                rgb: 1.0,
                audio: 1.0,
                asr: 1.0,
                asr_feature: 0.1,
                asr_topic: 1.0,
                caption: 1.0,
            },
            caption_len_min: 4,
            caption_len_max: 8,
            duration_min: 6,
            duration_max: 14,
            words_per_second: [0.2, 0.5, 0.3],
            silence_alignment: false,
            silence_fraction: 0.25,
            world_seed: 7,
            seed: 11,
        }
    }

    /// Reference expert widths (appearance 1024, sound 128, wordpiece 768).
    pub fn reference() -> Self {
        Self {
            rgb_dim: 1024,
            audio_dim: 128,
            asr_dim: 768,
            vocab_size: 30522,
            latent_dim: 64,
            duration_min: 10,
            duration_max: 120,
            caption_len_min: 8,
            caption_len_max: 30,
            ..Self::toy()
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            rgb: self.rgb_dim,
            audio: self.audio_dim,
            asr: self.asr_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CorpusError::Config(m.to_string()));
        if self.latent_dim == 0 || self.rgb_dim == 0 || self.audio_dim == 0 || self.asr_dim == 0 || self.vocab_size == 0 {
            return bad("data: all dimensions must be >= 1");
        }
        let n = &self.noise;
        if [n.rgb, n.audio, n.asr, n.asr_feature, n.asr_topic, n.caption].iter().any(|s| !(*s >= 0.0)) {
            return bad("data.noise: sigmas must be >= 0");
        }
        if self.caption_len_min == 0 || self.caption_len_min > self.caption_len_max {
            return bad("data: caption length range must satisfy 1 <= min <= max");
        }
        if self.duration_min == 0 || self.duration_min > self.duration_max {
            return bad("data: duration range must satisfy 1 <= min <= max");
        }
        let w = self.words_per_second;
        if w.iter().any(|p| !(*p >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("data.words_per_second must be a probability vector");
        }
        if !(0.0..1.0).contains(&self.silence_fraction) {
            return bad("data.silence_fraction must be in [0, 1)");
        }
        Ok(())
    }
}

/// Fixed per-world projection matrices and vocabulary codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub dims: Dims,
    pub latent_dim: usize,
    pub vocab_size: usize,
    pub projections: [Vec<f64>; 3],
    pub codebook: Vec<f64>,
}

fn normal_vec(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v * scale
        })
        .collect()
}

impl World {
    pub fn new(cfg: &GeneratorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.world_seed);
        let z = cfg.latent_dim;
        let scale = 1.0 / (z as f64).sqrt();
        let dims = cfg.dims();
        let projections = [
            normal_vec(dims.rgb * z, scale, &mut rng),
            normal_vec(dims.audio * z, scale, &mut rng),
            normal_vec(dims.asr * z, scale, &mut rng),
        ];
        let codebook = normal_vec(cfg.vocab_size * dims.asr, 1.0, &mut rng);
        Self {
            dims,
            latent_dim: z,
            vocab_size: cfg.vocab_size,
            projections,
            codebook,
        }
    }

    /// `A_m · z`.
    pub fn project(&self, m: ModalityId, z: &[f64]) -> Vec<f64> {
        let a = &self.projections[m.index()];
        let zd = self.latent_dim;
        (0..self.dims.get(m))
            .map(|r| a[r * zd..(r + 1) * zd].iter().zip(z).map(|(x, y)| x * y).sum())
            .collect()
    }

    pub fn code(&self, token: usize) -> &[f64] {
        &self.codebook[token * self.dims.asr..(token + 1) * self.dims.asr]
    }

    /// Euclidean-nearest codebook token.
    pub fn nearest_token(&self, u: &[f64]) -> u32 {
        let mut best = (f64::INFINITY, 0u32);
        for t in 0..self.vocab_size {
            let d: f64 = self.code(t).iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, t as u32);
            }
        }
        best.1
    }

    fn draw_token(&self, center: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> u32 {
        let u: Vec<f64> = center
            .iter()
            .map(|c| {
                let e: f64 = StandardNormal.sample(rng);
                c + sigma * e
            })
            .collect();
        self.nearest_token(&u)
    }

    /// Draws one clip. `latent` forces the semantic vector instead of sampling it.
    pub fn generate_clip(
        &self,
        cfg: &GeneratorConfig,
        clip_id: u64,
        latent: Option<Vec<f64>>,
        rng: &mut ChaCha8Rng,
    ) -> ClipRecord {
        let z = latent.unwrap_or_else(|| normal_vec(self.latent_dim, 1.0, rng));
        let duration = rng.random_range(cfg.duration_min..=cfg.duration_max);
        let silent: Vec<bool> = (0..duration)
            .map(|_| cfg.silence_alignment && rng.random::<f64>() < cfg.silence_fraction)
            .collect();

        let noisy_rows = |m: ModalityId, sigma: f64, rng: &mut ChaCha8Rng| {
            let center = self.project(m, &z);
            let mut seq = FeatureSeq::empty(center.len());
            for t in 0..duration as usize {
                let row: Vec<f64> = if m == ModalityId::Audio && silent[t] {
                    vec![0.0; center.len()]
                } else {
                    center
                        .iter()
                        .map(|c| {
                            let e: f64 = StandardNormal.sample(rng);
                            c + sigma * e
                        })
                        .collect()
                };
                seq.push(&row);
            }
            seq
        };
        let rgb = noisy_rows(ModalityId::Rgb, cfg.noise.rgb, rng);
        let audio = noisy_rows(ModalityId::Audio, cfg.noise.audio, rng);

        let caption_center = self.project(ModalityId::Asr, &z);
        let speech_center: Vec<f64> = caption_center
            .iter()
            .map(|c| {
                let e: f64 = StandardNormal.sample(rng);
                c + cfg.noise.asr_topic * e
            })
            .collect();
        let mut asr = FeatureSeq::empty(self.dims.asr);
        let mut asr_times = Vec::new();
        let wps = cfg.words_per_second;
        for (t, quiet) in silent.iter().enumerate() {
            let u: f64 = rng.random();
            let words = if u < wps[0] {
                0
            } else if u < wps[0] + wps[1] {
                1
            } else {
                2
            };
            if *quiet {
                continue;
            }
            for _ in 0..words {
                let tok = self.draw_token(&speech_center, cfg.noise.asr, rng);
                let feat: Vec<f64> = self
                    .code(tok as usize)
                    .iter()
                    .map(|c| {
                        let e: f64 = StandardNormal.sample(rng);
                        c + cfg.noise.asr_feature * e
                    })
                    .collect();
                asr.push(&feat);
                asr_times.push(t as u32);
            }
        }

        let cap_len = rng.random_range(cfg.caption_len_min..=cfg.caption_len_max);
        let caption_tokens = (0..cap_len)
            .map(|_| self.draw_token(&caption_center, cfg.noise.caption, rng))
            .collect();

        ClipRecord {
            clip_id,
            duration_s: duration,
            rgb,
            audio,
            asr,
            asr_times,
            caption_tokens,
            latent: z,
        }
    }
}

fn split_hash(clip_id: u64, seed: u64) -> u64 {
    // splitmix64 finalizer
    let mut x = clip_id ^ seed.rotate_left(32) ^ 0x9e37_79b9_7f4a_7c15;
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Orders clips by a seeded hash of their id and assigns the first 80% to
/// train, the next 10% to val and the rest to test.
pub fn assign_splits(clip_ids: &[u64], seed: u64) -> Vec<Split> {
    let n = clip_ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (split_hash(clip_ids[i], seed), clip_ids[i]));
    let n_train = (n as f64 * 0.8).round() as usize;
    let n_val = (n as f64 * 0.1).round() as usize;
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

/// In-memory corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub records: Vec<ClipRecord>,
    index: HashMap<u64, usize>,
}

impl Corpus {
    pub fn new(manifest: CorpusManifest, records: Vec<ClipRecord>) -> Self {
        let index = records.iter().enumerate().map(|(i, r)| (r.clip_id, i)).collect();
        Self {
            manifest,
            records,
            index,
        }
    }

    pub fn world(&self) -> World {
        World {
            dims: self.manifest.dims,
            latent_dim: self.manifest.latent_dim,
            vocab_size: self.manifest.vocab_size,
            projections: self.manifest.projections.clone(),
            codebook: self.manifest.codebook.clone(),
        }
    }
}

impl ClipSource for Corpus {
    fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    fn clip(&self, clip_id: u64) -> Result<Cow<'_, ClipRecord>> {
        self.index
            .get(&clip_id)
            .map(|&i| Cow::Borrowed(&self.records[i]))
            .ok_or(CorpusError::UnknownClip(clip_id))
    }
}

/// Generates `cfg.n_clips` clips over an existing world. Clip `k` draws from
/// its own ChaCha stream, so clips are independent of corpus size.
pub fn generate_from_world(cfg: &GeneratorConfig, world: &World) -> Result<Corpus> {
    cfg.validate()?;
    if cfg.n_clips == 0 {
        return Err(CorpusError::EmptyCorpus);
    }
    let records: Vec<ClipRecord> = (0..cfg.n_clips as u64)
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(id);
            world.generate_clip(cfg, id, None, &mut rng)
        })
        .collect();
    let clip_ids: Vec<u64> = records.iter().map(|r| r.clip_id).collect();
    let splits = assign_splits(&clip_ids, cfg.seed);
    let manifest = CorpusManifest {
        format_version: super::STORE_VERSION,
        dims: world.dims,
        latent_dim: world.latent_dim,
        vocab_size: world.vocab_size,
        generator: cfg.clone(),
        projections: world.projections.clone(),
        codebook: world.codebook.clone(),
        clip_ids,
        splits,
        offsets: Vec::new(),
    };
    Ok(Corpus::new(manifest, records))
}

pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<Corpus> {
    cfg.validate()?;
    generate_from_world(cfg, &World::new(cfg))
}
