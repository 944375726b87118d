//! Little-endian binary feature store.
//!
//! ```text
//! magic[8] version:u32
//! header: d_rgb d_aud d_asr latent vocab :u32, n_clips:u64, manifest_len:u64, records_len:u64
//! manifest block (manifest_len bytes) crc32(header ‖ manifest):u32
//! records: { len:u32 body[len] crc32(body):u32 } × n_clips
//! ```

use std::borrow::Cow;
use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use super::generator::Corpus;
use super::{ClipRecord, ClipSource, CorpusError, CorpusManifest, Dims, FeatureSeq, GeneratorConfig, Result, Split};

pub const STORE_MAGIC: [u8; 8] = *b"MMFSTORE";
pub const STORE_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 5 * 4 + 3 * 8;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn u32s(&mut self, v: &[u32]) {
        for x in v {
            self.u32(*x);
        }
    }
    fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.0.extend_from_slice(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'a str) -> Self {
        Self { buf, pos: 0, what }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| CorpusError::Malformed(format!("{} ends early", self.what)))?;
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
    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| CorpusError::Malformed(format!("{}: length overflow", self.what)))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| CorpusError::Malformed("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| CorpusError::Malformed("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(CorpusError::Malformed(format!("{} has trailing bytes", self.what)))
        }
    }
}

fn encode_record(r: &ClipRecord) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u64(r.clip_id);
    w.u32(r.duration_s);
    for n in [r.rgb.len(), r.audio.len(), r.asr.len(), r.caption_tokens.len(), r.latent.len()] {
        w.u32(n as u32);
    }
    w.f64s(r.rgb.data());
    w.f64s(r.audio.data());
    w.f64s(r.asr.data());
    w.u32s(&r.asr_times);
    w.u32s(&r.caption_tokens);
    w.f64s(&r.latent);
    w.0
}

fn decode_record(body: &[u8], dims: Dims) -> Result<ClipRecord> {
    let mut r = Reader::new(body, "record");
    let clip_id = r.u64()?;
    let duration_s = r.u32()?;
    let mut n = [0usize; 5];
    for v in &mut n {
        *v = r.u32()? as usize;
    }
    let rgb = FeatureSeq::new(dims.rgb, r.f64s(n[0] * dims.rgb)?);
    let audio = FeatureSeq::new(dims.audio, r.f64s(n[1] * dims.audio)?);
    let asr = FeatureSeq::new(dims.asr, r.f64s(n[2] * dims.asr)?);
    let asr_times = r.u32s(n[2])?;
    let caption_tokens = r.u32s(n[3])?;
    let latent = r.f64s(n[4])?;
    r.finish()?;
    Ok(ClipRecord {
        clip_id,
        duration_s,
        rgb,
        audio,
        asr,
        asr_times,
        caption_tokens,
        latent,
    })
}

fn encode_manifest(m: &CorpusManifest) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    let cfg = serde_json::to_vec(&m.generator).expect("generator config serializes");
    w.bytes(&cfg);
    for p in &m.projections {
        w.u64(p.len() as u64);
        w.f64s(p);
    }
    w.u64(m.codebook.len() as u64);
    w.f64s(&m.codebook);
    for (&id, split) in m.clip_ids.iter().zip(&m.splits) {
        w.u64(id);
        w.0.push(split.code());
    }
    for &o in &m.offsets {
        w.u64(o);
    }
    w.0
}

fn header_bytes(m: &CorpusManifest, manifest_len: u64, records_len: u64) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(HEADER_LEN));
    w.0.extend_from_slice(&STORE_MAGIC);
    w.u32(m.format_version);
    for d in [m.dims.rgb, m.dims.audio, m.dims.asr, m.latent_dim, m.vocab_size] {
        w.u32(d as u32);
    }
    w.u64(m.clip_ids.len() as u64);
    w.u64(manifest_len);
    w.u64(records_len);
    w.0
}

/// Serializes a manifest and its records. Returns the manifest with the
/// record offsets filled in, which is exactly what `read_store` yields.
pub fn write_store(manifest: &CorpusManifest, records: &[ClipRecord], path: &Path) -> Result<CorpusManifest> {
    if records.len() != manifest.clip_ids.len() || records.iter().zip(&manifest.clip_ids).any(|(r, id)| r.clip_id != *id) {
        return Err(CorpusError::Malformed("records do not match the manifest clip list".into()));
    }
    let mut section = Vec::new();
    let mut offsets = Vec::with_capacity(records.len());
    for r in records {
        offsets.push(section.len() as u64);
        let body = encode_record(r);
        section.extend_from_slice(&(body.len() as u32).to_le_bytes());
        section.extend_from_slice(&body);
        section.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    }
    let mut out_manifest = manifest.clone();
    out_manifest.format_version = STORE_VERSION;
    out_manifest.offsets = offsets;
    let block = encode_manifest(&out_manifest);
    let header = header_bytes(&out_manifest, block.len() as u64, section.len() as u64);
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&header);
    hasher.update(&block);
    let crc = hasher.finalize();

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(File::create(path)?);
    f.write_all(&header)?;
    f.write_all(&block)?;
    f.write_all(&crc.to_le_bytes())?;
    f.write_all(&section)?;
    f.flush()?;
    Ok(out_manifest)
}

/// Opened store: the manifest is decoded eagerly, records on demand.
#[derive(Debug)]
pub struct Store {
    path: PathBuf,
    file: File,
    manifest: CorpusManifest,
    records_start: u64,
    index: HashMap<u64, usize>,
}

pub fn read_store(path: &Path) -> Result<Store> {
    let mut file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut header = vec![0u8; HEADER_LEN];
    if file_len < 12 {
        return Err(CorpusError::Truncated("file shorter than the header".into()));
    }
    file.read_exact(&mut header[..12])?;
    if header[..8] != STORE_MAGIC {
        return Err(CorpusError::BadMagic);
    }
    let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
    if version != STORE_VERSION {
        return Err(CorpusError::VersionMismatch {
            found: version,
            expected: STORE_VERSION,
        });
    }
    if file_len < HEADER_LEN as u64 {
        return Err(CorpusError::Truncated("file shorter than the header".into()));
    }
    file.read_exact(&mut header[12..])?;
    let mut h = Reader::new(&header[12..], "header");
    let mut d = [0usize; 5];
    for v in &mut d {
        *v = h.u32()? as usize;
    }
    let n_clips = h.len()?;
    let manifest_len = h.u64()?;
    let records_len = h.u64()?;
    let records_start = HEADER_LEN as u64 + manifest_len + 4;
    if file_len < records_start {
        return Err(CorpusError::Truncated("manifest block incomplete".into()));
    }
    if file_len < records_start + records_len {
        return Err(CorpusError::Truncated(format!(
            "record section has {} of {records_len} bytes",
            file_len - records_start
        )));
    }
    if file_len > records_start + records_len {
        return Err(CorpusError::Malformed("trailing bytes after the record section".into()));
    }
    let mut block = vec![0u8; manifest_len as usize + 4];
    file.read_exact(&mut block)?;
    let stored_crc = u32::from_le_bytes(block[manifest_len as usize..].try_into().unwrap());
    block.truncate(manifest_len as usize);
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&header);
    hasher.update(&block);
    if hasher.finalize() != stored_crc {
        return Err(CorpusError::Checksum("manifest".into()));
    }

    let dims = Dims {
        rgb: d[0],
        audio: d[1],
        asr: d[2],
    };
    let mut r = Reader::new(&block, "manifest");
    let generator: GeneratorConfig =
        serde_json::from_slice(r.bytes()?).map_err(|e| CorpusError::Malformed(format!("generator config: {e}")))?;
    let mut projections: [Vec<f64>; 3] = Default::default();
    for p in &mut projections {
        let n = r.len()?;
        *p = r.f64s(n)?;
    }
    let n = r.len()?;
    let codebook = r.f64s(n)?;
    let mut clip_ids = Vec::with_capacity(n_clips);
    let mut splits = Vec::with_capacity(n_clips);
    for _ in 0..n_clips {
        clip_ids.push(r.u64()?);
        let code = r.take(1)?[0];
        splits.push(Split::from_code(code).ok_or_else(|| CorpusError::Malformed(format!("split code {code}")))?);
    }
    let mut offsets = Vec::with_capacity(n_clips);
    for _ in 0..n_clips {
        offsets.push(r.u64()?);
    }
    r.finish()?;
    if offsets.windows(2).any(|w| w[0] >= w[1]) || offsets.last().is_some_and(|o| *o >= records_len) {
        return Err(CorpusError::Malformed("record offsets are not strictly increasing".into()));
    }
    let manifest = CorpusManifest {
        format_version: version,
        dims,
        latent_dim: d[3],
        vocab_size: d[4],
        generator,
        projections,
        codebook,
        clip_ids,
        splits,
        offsets,
    };
    let index = manifest.clip_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    Ok(Store {
        path: path.to_path_buf(),
        file,
        manifest,
        records_start,
        index,
    })
}

impl Store {
    pub fn path(&self) -> &Path {
        &self.path
    }

    fn read_at(&self, offset: u64, len: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        self.file.read_exact_at(&mut buf, self.records_start + offset)?;
        Ok(buf)
    }

    /// Reads the record at position `i` of the manifest, verifying its checksum.
    pub fn record_at(&self, i: usize) -> Result<ClipRecord> {
        let id = self.manifest.clip_ids[i];
        let off = self.manifest.offsets[i];
        let len = u32::from_le_bytes(self.read_at(off, 4)?.try_into().unwrap()) as usize;
        let bytes = self.read_at(off + 4, len + 4)?;
        let (body, crc) = bytes.split_at(len);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
            return Err(CorpusError::Checksum(format!("clip {id}")));
        }
        let rec = decode_record(body, self.manifest.dims)?;
        if rec.clip_id != id {
            return Err(CorpusError::Malformed(format!("record at clip {id} holds clip {}", rec.clip_id)));
        }
        Ok(rec)
    }

    /// Reads every record into memory.
    pub fn load_all(&self) -> Result<Corpus> {
        let records = (0..self.manifest.clip_count()).map(|i| self.record_at(i)).collect::<Result<Vec<_>>>()?;
        Ok(Corpus::new(self.manifest.clone(), records))
    }
}

impl ClipSource for Store {
    fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    fn clip(&self, clip_id: u64) -> Result<Cow<'_, ClipRecord>> {
        let i = *self.index.get(&clip_id).ok_or(CorpusError::UnknownClip(clip_id))?;
        self.record_at(i).map(Cow::Owned)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_corpus;

    fn corpus(n: usize) -> Corpus {
        generate_corpus(&GeneratorConfig {
            n_clips: n,
            ..GeneratorConfig::toy()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let c = corpus(100);
        let m = write_store(&c.manifest, &c.records, &path).unwrap();
        let s = read_store(&path).unwrap();
        assert_eq!(s.manifest(), &m);
        let back = s.load_all().unwrap();
        assert_eq!(back.records, c.records);
        // random access by id
        assert_eq!(*s.clip(57).unwrap(), c.records[57]);
        assert!(matches!(s.clip(1000), Err(CorpusError::UnknownClip(1000))));
    }

    #[test]
    fn writing_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let c1 = corpus(10);
        let c2 = corpus(10);
        write_store(&c1.manifest, &c1.records, &a).unwrap();
        write_store(&c2.manifest, &c2.records, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn corrupt_record_reports_the_clip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let c = corpus(5);
        let m = write_store(&c.manifest, &c.records, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let s = read_store(&path).unwrap();
        let pos = s.records_start + m.offsets[3] + 20;
        bytes[pos as usize] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let s = read_store(&path).unwrap();
        match s.clip(3) {
            Err(CorpusError::Checksum(what)) => assert!(what.contains('3')),
            other => panic!("expected checksum error, got {other:?}"),
        }
        assert!(s.clip(2).is_ok());
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let c = corpus(3);
        write_store(&c.manifest, &c.records, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut v = good.clone();
        v[8] = 9;
        std::fs::write(&path, &v).unwrap();
        assert!(matches!(read_store(&path), Err(CorpusError::VersionMismatch { found: 9, .. })));

        std::fs::write(&path, &good[..good.len() - 10]).unwrap();
        assert!(matches!(read_store(&path), Err(CorpusError::Truncated(_))));

        let mut v = good.clone();
        v[HEADER_LEN + 3] ^= 1;
        std::fs::write(&path, &v).unwrap();
        assert!(matches!(read_store(&path), Err(CorpusError::Checksum(_))));

        let mut v = good;
        v[0] = b'X';
        std::fs::write(&path, &v).unwrap();
        assert!(matches!(read_store(&path), Err(CorpusError::BadMagic)));
    }

    #[test]
    fn empty_store_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let mut c = corpus(2);
        c.manifest.clip_ids.clear();
        c.manifest.splits.clear();
        write_store(&c.manifest, &[], &path).unwrap();
        let s = read_store(&path).unwrap();
        assert_eq!(s.manifest().clip_count(), 0);
        assert!(s.load_all().unwrap().records.is_empty());
    }
}
