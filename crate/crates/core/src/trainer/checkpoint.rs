//! Versioned binary checkpoint.
//!
//! ```text
//! magic[8] version:u32 meta_len:u64 meta(JSON)
//! n:u32 { name_len:u32 name ndim:u32 dims:u64×ndim data:f64×numel } × n
//! adam_t:u64 { m:f64×numel v:f64×numel } × n
//! crc32(everything above):u32
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamState, Result, TrainConfig, TrainError};
use crate::corpus::Dims;
use crate::encoders::{ModelConfig, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"MMCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Exact position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Stored as a decimal string in JSON, since it exceeds 64 bits.
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    step: u64,
    fingerprint: String,
    model: ModelConfig,
    dims: Dims,
    train: TrainConfig,
    rng: RngState,
}

/// Parameters, optimizer state, step counter, config fingerprint and rng state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub fingerprint: String,
    pub model_config: ModelConfig,
    pub dims: Dims,
    pub train_config: TrainConfig,
    pub params: ParamStore,
    pub adam: AdamState,
    pub rng: RngState,
}

fn bad(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| bad("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(8).ok_or_else(|| bad("size overflow"))?)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            step: self.step,
            fingerprint: self.fingerprint.clone(),
            model: self.model_config.clone(),
            dims: self.dims,
            train: self.train_config.clone(),
            rng: self.rng,
        };
        let meta = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            put_f64s(&mut out, t.data());
        }
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        for (m, v) in self.adam.m.iter().zip(&self.adam.v) {
            put_f64s(&mut out, m);
            put_f64s(&mut out, v);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")));
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
            return Err(bad("checkpoint checksum mismatch"));
        }
        let mut c = Cursor { buf: body, pos: 12 };
        let meta_len = c.u64()? as usize;
        let meta: Meta = serde_json::from_slice(c.take(meta_len)?).map_err(|e| bad(format!("metadata: {e}")))?;
        let n = c.u32()? as usize;
        let mut params = ParamStore::new();
        let mut sizes = Vec::with_capacity(n);
        for _ in 0..n {
            let len = c.u32()? as usize;
            let name = std::str::from_utf8(c.take(len)?).map_err(|_| bad("parameter name is not utf-8"))?.to_string();
            let ndim = c.u32()? as usize;
            let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let t = Tensor::new(shape, c.f64s(numel)?).map_err(|e| bad(e.to_string()))?;
            if params.id(&name).is_some() {
                return Err(bad(format!("duplicate parameter {name}")));
            }
            params.add(name, t);
            sizes.push(numel);
        }
        let t = c.u64()?;
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for &numel in &sizes {
            m.push(c.f64s(numel)?);
            v.push(c.f64s(numel)?);
        }
        if c.pos != body.len() {
            return Err(bad("trailing bytes in checkpoint"));
        }
        Ok(Self {
            step: meta.step,
            fingerprint: meta.fingerprint,
            model_config: meta.model,
            dims: meta.dims,
            train_config: meta.train,
            params,
            adam: AdamState { m, v, t },
            rng: meta.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
