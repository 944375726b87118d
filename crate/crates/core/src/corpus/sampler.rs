use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClipRecord, ClipSample, ClipSource, CorpusError, Result, Stream};
use crate::encoders::{Caps, ModalityId};

/// How clips are cut down before reaching the encoders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropConfig {
    /// Crop length in seconds; ASR words are kept only inside the visual crop.
    pub crop_s: u32,
    pub caps: Caps,
    /// Consecutive caption tokens kept per clip.
    pub caption_window: usize,
}

fn crop_record(r: &ClipRecord, start: u32, crop_s: u32) -> [Stream; 3] {
    let end = (start + crop_s).min(r.duration_s);
    let per_second = |m: ModalityId| {
        let s = r.stream(m);
        let mut out = s.range(start as usize, end as usize);
        out.times.iter_mut().for_each(|t| *t -= start);
        out
    };
    let asr_full = r.stream(ModalityId::Asr);
    let keep: Vec<usize> = (0..asr_full.len())
        .filter(|&i| (start..end).contains(&asr_full.times[i]))
        .collect();
    let mut asr = asr_full.select(&keep);
    asr.times.iter_mut().for_each(|t| *t -= start);
    [per_second(ModalityId::Rgb), per_second(ModalityId::Audio), asr]
}

/// Uniform random subsample of `cap` tokens, kept in temporal order.
fn subsample(s: &Stream, cap: usize, rng: &mut ChaCha8Rng) -> Stream {
    if s.len() <= cap {
        return s.clone();
    }
    let mut rows = index::sample(rng, s.len(), cap).into_vec();
    rows.sort_unstable();
    s.select(&rows)
}

fn random_window(len: usize, cap: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
    if len <= cap {
        (0, len)
    } else {
        let start = rng.random_range(0..=len - cap);
        (start, start + cap)
    }
}

/// Crops and caps one clip at a random offset.
pub fn crop_random(r: &ClipRecord, crop: &CropConfig, rng: &mut ChaCha8Rng) -> ClipSample {
    let start = if r.duration_s > crop.crop_s {
        rng.random_range(0..=r.duration_s - crop.crop_s)
    } else {
        0
    };
    let [rgb, audio, asr] = crop_record(r, start, crop.crop_s);
    let rgb = subsample(&rgb, crop.caps.rgb, rng);
    let audio = subsample(&audio, crop.caps.audio, rng);
    let (a, b) = random_window(asr.len(), crop.caps.asr, rng);
    let asr = asr.range(a, b);
    let (a, b) = random_window(r.caption_tokens.len(), crop.caption_window, rng);
    ClipSample {
        clip_id: r.clip_id,
        streams: [rgb, audio, asr],
        caption: r.caption_tokens[a..b].to_vec(),
    }
}

/// Deterministic crop for evaluation: the first `crop_s` seconds, evenly
/// strided subsampling to the caps, the leading ASR and caption windows.
pub fn crop_for_eval(r: &ClipRecord, crop: &CropConfig) -> ClipSample {
    let [rgb, audio, asr] = crop_record(r, 0, crop.crop_s);
    let stride = |s: &Stream, cap: usize| {
        if s.len() <= cap {
            s.clone()
        } else {
            let rows: Vec<usize> = (0..cap).map(|i| i * s.len() / cap).collect();
            s.select(&rows)
        }
    };
    let rgb = stride(&rgb, crop.caps.rgb);
    let audio = stride(&audio, crop.caps.audio);
    let asr = asr.range(0, asr.len().min(crop.caps.asr));
    let n = r.caption_tokens.len().min(crop.caption_window);
    ClipSample {
        clip_id: r.clip_id,
        streams: [rgb, audio, asr],
        caption: r.caption_tokens[..n].to_vec(),
    }
}

/// Draws `batch_size` distinct clips from `pool` and crops each at random.
pub fn sample_batch(
    source: &dyn ClipSource,
    pool: &[u64],
    batch_size: usize,
    crop: &CropConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ClipSample>> {
    if batch_size < 2 {
        return Err(CorpusError::Config(format!("batch size {batch_size} < 2 leaves no negatives")));
    }
    if crop.caps.rgb == 0 || crop.caps.audio == 0 || crop.caps.asr == 0 || crop.caption_window == 0 || crop.crop_s == 0 {
        return Err(CorpusError::Config("crop length, caps and caption window must be >= 1".into()));
    }
    if batch_size > pool.len() {
        return Err(CorpusError::InsufficientData {
            requested: batch_size,
            available: pool.len(),
        });
    }
    let picks = index::sample(rng, pool.len(), batch_size).into_vec();
    picks
        .into_iter()
        .map(|i| {
            let rec = source.clip(pool[i])?;
            Ok(crop_random(&rec, crop, rng))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::corpus::{generate_corpus, GeneratorConfig, Split};

    fn crop() -> CropConfig {
        CropConfig {
            crop_s: 10,
            caps: Caps {
                rgb: 30,
                audio: 30,
                asr: 128,
            },
            caption_window: 30,
        }
    }

    #[test]
    fn caps_bound_long_clips() {
        let cfg = GeneratorConfig {
            n_clips: 4,
            duration_min: 60,
            duration_max: 60,
            ..GeneratorConfig::toy()
        };
        let c = generate_corpus(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cc = CropConfig { crop_s: 60, ..crop() };
        let s = crop_random(&c.records[0], &cc, &mut rng);
        assert_eq!(s.streams[0].len(), 30);
        assert_eq!(s.streams[1].len(), 30);
        assert!(s.streams[0].times.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn short_clip_is_returned_whole() {
        let c = generate_corpus(&GeneratorConfig {
            n_clips: 2,
            duration_min: 5,
            duration_max: 5,
            ..GeneratorConfig::toy()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = &c.records[1];
        let s = crop_random(r, &crop(), &mut rng);
        assert_eq!(s.streams[0].len(), 5);
        assert_eq!(s.streams[1].features, r.audio);
        assert_eq!(s.streams[2].len(), r.asr.len());
        assert_eq!(s.caption, r.caption_tokens);
    }

    #[test]
    fn asr_stays_inside_the_visual_crop() {
        let c = generate_corpus(&GeneratorConfig {
            n_clips: 20,
            duration_min: 30,
            duration_max: 40,
            ..GeneratorConfig::toy()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for r in &c.records {
            let s = crop_random(r, &crop(), &mut rng);
            assert!(s.streams[2].times.iter().all(|t| *t < 10));
            assert!(s.streams[0].len() == 10);
        }
    }

    #[test]
    fn batches_are_distinct_and_deterministic() {
        let c = generate_corpus(&GeneratorConfig {
            n_clips: 50,
            ..GeneratorConfig::toy()
        })
        .unwrap();
        let pool = c.manifest.split_ids(Split::Train);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_batch(&c, &pool, 16, &crop(), &mut rng).unwrap()
        };
        let a = draw(1);
        let mut ids: Vec<u64> = a.iter().map(|s| s.clip_id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 16);
        assert_eq!(a, draw(1));
        assert!(matches!(
            sample_batch(&c, &pool[..3], 4, &crop(), &mut ChaCha8Rng::seed_from_u64(0)),
            Err(CorpusError::InsufficientData { requested: 4, available: 3 })
        ));
    }
}
