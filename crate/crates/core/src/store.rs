//! Artifact persistence: JSON documents and a binary array container.
//!
//! Container layout: the 8-byte magic `LFKBLOB1`, the header length as a
//! little-endian u64, a JSON header `{"meta": .., "arrays": [..]}` and the
//! raw little-endian payload. Each array entry records its name, dtype,
//! shape, byte offset into the payload and byte length.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LFKBLOB1";

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U32(Vec<u32>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F64(_) => "f64",
            ArrayData::F32(_) => "f32",
            ArrayData::U32(_) => "u32",
            ArrayData::U8(_) => "u8",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::F32(v) => v.len(),
            ArrayData::U32(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U8(v) => out.extend_from_slice(v),
        }
    }

    fn read_le(dtype: &str, bytes: &[u8]) -> Option<Self> {
        Some(match dtype {
            "f64" => ArrayData::F64(
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            "f32" => ArrayData::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            "u32" => ArrayData::U32(
                bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            "u8" => ArrayData::U8(bytes.to_vec()),
            _ => return None,
        })
    }

    fn item_size(dtype: &str) -> Option<usize> {
        match dtype {
            "f64" => Some(8),
            "f32" | "u32" => Some(4),
            "u8" => Some(1),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: Value,
    arrays: Vec<ArrayEntry>,
}

/// Named arrays plus a free-form JSON header.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub meta: Value,
    arrays: Vec<(String, Vec<usize>, ArrayData)>,
}

impl Blob {
    pub fn new(meta: Value) -> Self {
        Self { meta, arrays: Vec::new() }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: ArrayData) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape of array `{name}`");
        self.arrays.push((name.to_string(), shape.to_vec(), data));
    }

    pub fn with(mut self, name: &str, shape: &[usize], data: ArrayData) -> Self {
        self.push(name, shape, data);
        self
    }

    fn find(&self, name: &str) -> Result<&(String, Vec<usize>, ArrayData)> {
        self.arrays
            .iter()
            .find(|a| a.0 == name)
            .ok_or_else(|| Error::input(format!("array `{name}` missing from container")))
    }

    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        Ok(&self.find(name)?.1)
    }

    pub fn f64s(&self, name: &str) -> Result<Vec<f64>> {
        match &self.find(name)?.2 {
            ArrayData::F64(v) => Ok(v.clone()),
            ArrayData::F32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            _ => Err(Error::input(format!("array `{name}` is not floating point"))),
        }
    }

    pub fn u32s(&self, name: &str) -> Result<Vec<u32>> {
        match &self.find(name)?.2 {
            ArrayData::U32(v) => Ok(v.clone()),
            _ => Err(Error::input(format!("array `{name}` is not u32"))),
        }
    }

    pub fn u8s(&self, name: &str) -> Result<Vec<u8>> {
        match &self.find(name)?.2 {
            ArrayData::U8(v) => Ok(v.clone()),
            _ => Err(Error::input(format!("array `{name}` is not u8"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        for (name, shape, data) in &self.arrays {
            let offset = payload.len();
            data.write_le(&mut payload);
            entries.push(ArrayEntry {
                name: name.clone(),
                dtype: data.dtype().into(),
                shape: shape.clone(),
                offset,
                nbytes: payload.len() - offset,
            });
        }
        let header = serde_json::to_vec(&Header { meta: self.meta.clone(), arrays: entries })?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.into() };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not an array container (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let payload = &bytes[16 + hlen..];
        let mut arrays = Vec::new();
        for e in header.arrays {
            let size = ArrayData::item_size(&e.dtype).ok_or_else(|| bad("unknown dtype"))?;
            let count: usize = e.shape.iter().product();
            if count * size != e.nbytes {
                return Err(bad(&format!("array `{}` size does not match its shape", e.name)));
            }
            let raw = payload
                .get(e.offset..e.offset + e.nbytes)
                .ok_or_else(|| bad(&format!("array `{}` runs past end of file", e.name)))?;
            let data = ArrayData::read_le(&e.dtype, raw).ok_or_else(|| bad("unknown dtype"))?;
            arrays.push((e.name, e.shape, data));
        }
        Ok(Self { meta: header.meta, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

/// Fail with a missing-artifact error naming the producing stage.
pub fn require(path: impl Into<PathBuf>, stage: &str) -> Result<PathBuf> {
    let path = path.into();
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact { stage: stage.into(), path })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn container_round_trip() {
        let blob = Blob::new(json!({"kind": "test", "h": 8.0}))
            .with("x", &[2, 3], ArrayData::F64(vec![1.0, 2.0, 3.0, 4.0, 5.0, -6.5]))
            .with("i", &[4], ArrayData::U32(vec![0, 1, 7, u32::MAX]))
            .with("w", &[2], ArrayData::F32(vec![0.5, -1.25]))
            .with("l", &[3], ArrayData::U8(vec![1, 0, 1]));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.bin");
        blob.write(&p).unwrap();
        let back = Blob::read(&p).unwrap();
        assert_eq!(back, blob);
        assert_eq!(back.shape("x").unwrap(), &[2, 3]);
        assert_eq!(back.f64s("w").unwrap(), vec![0.5, -1.25]);
        assert!(back.u32s("x").is_err());
        assert!(back.f64s("nope").is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = Path::new("mem");
        assert!(matches!(Blob::from_bytes(b"garbage", p), Err(Error::Format { .. })));
        let mut bytes = Blob::new(json!({}))
            .with("x", &[4], ArrayData::F64(vec![0.0; 4]))
            .to_bytes()
            .unwrap();
        bytes.truncate(bytes.len() - 8);
        assert!(matches!(Blob::from_bytes(&bytes, p), Err(Error::Format { .. })));
    }

    #[test]
    fn require_reports_stage() {
        let err = require("/nonexistent/file.bin", "gen-leadfields").unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("gen-leadfields"));
    }
}
