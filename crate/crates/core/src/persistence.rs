//! Versioned binary container for checkpoints and statistics sidecars.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "MOEL"
//! version      u16
//! meta_len     u32
//! metadata     meta_len bytes, UTF-8 JSON object with sorted keys;
//!              always carries "payload_sha256"
//! n_records    u32
//! record       n_records times:
//!                name_len u16, name bytes,
//!                dtype u8 (0 f32, 1 f64, 2 u64, 3 u8),
//!                rank u8, dims u64 × rank,
//!                offset u64, length u64   (relative to payload start)
//! payload      concatenated tensor bytes, row-major
//! trailer      32 bytes, SHA-256 of every preceding byte
//! ```

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MOEL";
pub const FORMAT_VERSION: u16 = 1;
const TRAILER_LEN: usize = 32;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U64 = 2,
    U8 = 3,
}

impl DType {
    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => DType::F32,
            1 => DType::F64,
            2 => DType::U64,
            3 => DType::U8,
            other => return Err(Error::Malformed(format!("unknown dtype tag {other}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::U64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl TensorData {
    fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U64(_) => DType::U64,
            TensorData::U8(_) => DType::U8,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> TensorData {
        match dtype {
            DType::F32 => TensorData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::F64 => TensorData::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::U64 => TensorData::U64(bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::U8 => TensorData::U8(bytes.to_vec()),
        }
    }

    /// Float view, widening f32.
    pub fn to_f64(&self) -> Result<Vec<f64>> {
        match self {
            TensorData::F32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            TensorData::F64(v) => Ok(v.clone()),
            _ => Err(Error::Malformed("expected a floating-point tensor".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<u64>, data: TensorData) -> Self {
        Tensor { name: name.into(), dims, data }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub metadata: Map<String, Value>,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn new(metadata: Map<String, Value>) -> Self {
        Container { metadata, tensors: Vec::new() }
    }

    pub fn push(&mut self, tensor: Tensor) {
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).ok_or_else(|| Error::Malformed(format!("missing tensor `{name}`")))
    }

    pub fn meta(&self, key: &str) -> Result<&Value> {
        self.metadata.get(key).ok_or_else(|| Error::Malformed(format!("missing metadata key `{key}`")))
    }

    fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for t in &self.tensors {
            if !names.insert(t.name.as_str()) {
                return Err(Error::Malformed(format!("duplicate tensor name `{}`", t.name)));
            }
            if t.name.len() > u16::MAX as usize || t.dims.len() > u8::MAX as usize {
                return Err(Error::Malformed(format!("tensor `{}` name or rank too large", t.name)));
            }
            let expected: u64 = t.dims.iter().product();
            if expected != t.data.len() as u64 {
                return Err(Error::Malformed(format!("tensor `{}`: {} values for dims {:?}", t.name, t.data.len(), t.dims)));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut payload = Vec::new();
        let mut spans = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let start = payload.len();
            t.data.write_le(&mut payload);
            spans.push((start as u64, (payload.len() - start) as u64));
        }
        let mut metadata = self.metadata.clone();
        metadata.insert("payload_sha256".into(), Value::String(sha256_hex(&payload)));
        let meta = serde_json::to_vec(&Value::Object(metadata))?;

        let mut out = Vec::with_capacity(payload.len() + meta.len() + 64 * self.tensors.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (t, (offset, length)) in self.tensors.iter().zip(spans) {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.data.dtype() as u8);
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&length.to_le_bytes());
        }
        out.extend_from_slice(&payload);
        let trailer = Sha256::digest(&out);
        out.extend_from_slice(&trailer);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Container> {
        if bytes.len() < 6 {
            return Err(Error::Truncated("header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion { found: version, supported: FORMAT_VERSION });
        }
        if bytes.len() < 6 + 4 + 4 + TRAILER_LEN {
            return Err(Error::Truncated("header"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - TRAILER_LEN);
        let computed = Sha256::digest(body);
        if computed.as_slice() != trailer {
            return Err(Error::DigestMismatch { stored: hex::encode(trailer), computed: hex::encode(computed) });
        }

        let mut r = Reader { bytes: body, pos: 6 };
        let meta_len = r.u32()? as usize;
        let meta_bytes = r.take(meta_len)?;
        let metadata = match serde_json::from_slice::<Value>(meta_bytes)? {
            Value::Object(m) => m,
            _ => return Err(Error::Malformed("metadata is not a JSON object".into())),
        };
        let n_records = r.u32()? as usize;
        let mut records = Vec::with_capacity(n_records.min(1 << 16));
        for _ in 0..n_records {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?;
            let dtype = DType::from_tag(r.u8()?)?;
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()?);
            }
            let offset = r.u64()?;
            let length = r.u64()?;
            records.push((name, dtype, dims, offset, length));
        }
        let payload = &body[r.pos..];
        let stored = metadata
            .get("payload_sha256")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Malformed("metadata lacks payload_sha256".into()))?;
        let computed = sha256_hex(payload);
        if stored != computed {
            return Err(Error::DigestMismatch { stored: stored.to_string(), computed });
        }

        let mut spans: Vec<(u64, u64)> = Vec::with_capacity(records.len());
        let mut tensors = Vec::with_capacity(records.len());
        for (name, dtype, dims, offset, length) in records {
            let count = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d)).ok_or_else(|| Error::Malformed(format!("tensor `{name}` dims overflow")))?;
            if count.checked_mul(dtype.size() as u64) != Some(length) {
                return Err(Error::Malformed(format!("tensor `{name}`: length {length} does not match dims {dims:?}")));
            }
            let end = offset.checked_add(length).filter(|&e| e <= payload.len() as u64).ok_or_else(|| Error::Malformed(format!("tensor `{name}` exceeds payload")))?;
            spans.push((offset, end));
            let data = TensorData::read_le(dtype, &payload[offset as usize..end as usize]);
            tensors.push(Tensor { name, dims, data });
        }
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[0].1 > w[1].0) {
            return Err(Error::Malformed("overlapping tensor payloads".into()));
        }
        let mut metadata = metadata;
        metadata.remove("payload_sha256");
        let c = Container { metadata, tensors };
        c.validate()?;
        Ok(c)
    }

    /// Atomic write via a temporary sibling and rename. Returns the SHA-256
    /// of the written bytes.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.encode()?;
        write_atomic(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Container> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::decode(&bytes)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path.file_name().ok_or_else(|| Error::io(path, std::io::Error::other("no file name")))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated("record table"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut meta = Map::new();
        meta.insert("kind".into(), Value::String("test".into()));
        let mut c = Container::new(meta);
        c.push(Tensor::new("a", vec![2, 3], TensorData::F32(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5])));
        c.push(Tensor::new("b", vec![2], TensorData::F64(vec![std::f64::consts::PI, -0.0])));
        c.push(Tensor::new("counts", vec![3], TensorData::U64(vec![1, 2, u64::MAX])));
        c.push(Tensor::new("flags", vec![4], TensorData::U8(vec![0, 1, 255, 7])));
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.encode().unwrap();
        let back = Container::decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn empty_record_table_is_valid() {
        let c = Container::default();
        let back = Container::decode(&c.encode().unwrap()).unwrap();
        assert!(back.tensors.is_empty());
    }

    #[test]
    fn every_byte_flip_is_rejected() {
        let bytes = sample().encode().unwrap();
        for i in 0..bytes.len() {
            let mut corrupt = bytes.clone();
            corrupt[i] ^= 0x5A;
            assert!(Container::decode(&corrupt).is_err(), "flip at {i} accepted");
        }
        let mut payload_flip = bytes.clone();
        let i = bytes.len() - TRAILER_LEN - 3;
        payload_flip[i] ^= 1;
        assert!(matches!(Container::decode(&payload_flip), Err(Error::DigestMismatch { .. })));
    }

    #[test]
    fn truncation_and_version_errors() {
        let bytes = sample().encode().unwrap();
        assert!(Container::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(matches!(Container::decode(&bytes[..3]), Err(Error::Truncated(_))));
        let mut future = bytes.clone();
        future[4..6].copy_from_slice(&2u16.to_le_bytes());
        match Container::decode(&future) {
            Err(Error::UnsupportedVersion { found, supported }) => assert_eq!((found, supported), (2, 1)),
            other => panic!("unexpected {other:?}"),
        }
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(Container::decode(&magic), Err(Error::BadMagic)));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = sample();
        c.push(Tensor::new("a", vec![1], TensorData::F64(vec![0.0])));
        assert!(c.encode().is_err());
    }

    #[test]
    fn save_is_atomic_and_reports_digest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.moel");
        let digest = sample().save(&path).unwrap();
        assert_eq!(digest, sha256_hex(&std::fs::read(&path).unwrap()));
        assert_eq!(Container::load(&path).unwrap(), sample());
        assert!(std::fs::read_dir(dir.path()).unwrap().count() == 1);
    }
}
