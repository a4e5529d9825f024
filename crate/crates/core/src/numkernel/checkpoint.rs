//! Parameter checkpoint files.
//!
//! Layout: the magic string `PVLA1`, a length-prefixed text header
//! (key=value lines naming the producing stage, config hash, seed, and module
//! dimensions), then per-parameter records: name length, name bytes, rank,
//! dims, little-endian 32-bit float payload. Loading upcasts to 64-bit.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::tensor::Tensor;
use super::ParamSet;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"PVLA1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("header mismatch: expected {key}={expected}, found {found}")]
    HeaderMismatch { key: String, expected: String, found: String },
}

/// Free-form key=value header carried by every checkpoint.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointHeader {
    entries: BTreeMap<String, String>,
}

impl CheckpointHeader {
    pub fn new(stage: &str, config_hash: &str, seed: u64) -> Self {
        let mut h = CheckpointHeader::default();
        h.set("stage", stage);
        h.set("config_hash", config_hash);
        h.set("seed", &seed.to_string());
        h
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Require `key` to be present and equal to `expected`.
    pub fn expect(&self, key: &str, expected: &str) -> Result<(), CheckpointError> {
        let found = self.get(key).unwrap_or("<absent>");
        if found != expected {
            return Err(CheckpointError::HeaderMismatch {
                key: key.to_string(),
                expected: expected.to_string(),
                found: found.to_string(),
            });
        }
        Ok(())
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s.into_bytes()
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let text = std::str::from_utf8(bytes)
            .map_err(|e| CheckpointError::Malformed(format!("header not utf-8: {e}")))?;
        let mut h = CheckpointHeader::default();
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Malformed(format!("bad header line `{line}`")))?;
            h.set(k, v);
        }
        Ok(h)
    }
}

pub fn save_checkpoint(
    path: &Path,
    header: &CheckpointHeader,
    params: &ParamSet,
) -> Result<(), CheckpointError> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let hbytes = header.to_bytes();
    out.extend_from_slice(&(hbytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&hbytes);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        out.extend_from_slice(nb);
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamSet), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    if cur.take(5)? != CHECKPOINT_MAGIC.as_slice() {
        return Err(CheckpointError::BadMagic);
    }
    let hlen = cur.u32()? as usize;
    let header = CheckpointHeader::from_bytes(cur.take(hlen)?)?;
    let count = cur.u32()? as usize;

    let mut params = ParamSet::new();
    for _ in 0..count {
        let nlen = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(nlen)?)
            .map_err(|e| CheckpointError::Malformed(format!("param name not utf-8: {e}")))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let raw: [u8; 4] = cur.take(4)?.try_into().unwrap();
            data.push(f32::from_le_bytes(raw) as f64);
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("param `{name}`: {e}")))?;
        params
            .insert(&name, tensor)
            .map_err(|e| CheckpointError::Malformed(format!("param `{name}`: {e}")))?;
    }
    Ok((header, params))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Malformed("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let raw: [u8; 4] = self.take(4)?.try_into().unwrap();
        Ok(u32::from_le_bytes(raw))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_shapes_and_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        let mut params = ParamSet::new();
        params.insert("a.w0", Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 1.5, -2.5, 0.0]).unwrap()).unwrap();
        params.insert("a.b0", Tensor::vector(vec![0.25, -0.75, 3.25]).unwrap()).unwrap();
        let mut header = CheckpointHeader::new("unit-test", "deadbeef", 42);
        header.set("d_f", "64");

        save_checkpoint(&path, &header, &params).unwrap();
        let (h2, p2) = load_checkpoint(&path).unwrap();

        assert_eq!(h2.get("stage"), Some("unit-test"));
        assert_eq!(h2.get("seed"), Some("42"));
        assert_eq!(h2.get("d_f"), Some("64"));
        assert_eq!(p2.len(), 2);
        // values chosen exactly representable in f32: upcast is lossless here
        assert_eq!(p2.get("a.b0").unwrap().data(), &[0.25, -0.75, 3.25]);
        assert_eq!(p2.get("a.w0").unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn payload_is_quantized_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.ckpt");
        let mut params = ParamSet::new();
        let v = 0.1_f64; // not representable in f32
        params.insert("w", Tensor::scalar(v).unwrap()).unwrap();
        save_checkpoint(&path, &CheckpointHeader::new("s", "h", 0), &params).unwrap();
        let (_, p2) = load_checkpoint(&path).unwrap();
        let loaded = p2.get("w").unwrap().data()[0];
        assert_eq!(loaded, v as f32 as f64);
        assert_ne!(loaded, v);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTPVLA-file").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn header_mismatch_is_detected() {
        let h = CheckpointHeader::new("s", "h", 1);
        assert!(h.expect("stage", "s").is_ok());
        assert!(matches!(
            h.expect("stage", "other"),
            Err(CheckpointError::HeaderMismatch { .. })
        ));
    }
}
