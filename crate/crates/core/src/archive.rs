//! Named-tensor archive used for checkpoints and feature caches.
//!
//! Layout (little endian):
//!
//! ```text
//! "CCAFARCH" | version: u32 | payload_len: u64 | sha256(payload): [u8; 32] | payload
//! payload = n_meta: u32, (key, value)*, n_tensors: u32, (name, ndim: u32, dims: u64*, data: f64*)*
//! ```
//!
//! Strings are a `u32` byte length followed by UTF-8. Values are stored as
//! f64 so f32 tensors round-trip exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CCAFARCH";
const VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 8 + 32;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor<f64>>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corruption("archive payload truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corruption("non UTF-8 string in archive".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Corruption(format!("archive lacks metadata `{key}`")))
    }

    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Corruption(format!("metadata `{key}`=`{raw}` is malformed")))
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.insert(name.into(), t.cast());
    }

    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.tensors
            .get(name)
            .map(Tensor::cast)
            .ok_or_else(|| Error::Corruption(format!("archive lacks tensor `{name}`")))
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Serialized bytes and the hex content hash.
    pub fn to_bytes(&self) -> (Vec<u8>, String) {
        let payload = self.payload();
        let digest = Sha256::digest(&payload);
        let mut out = Vec::with_capacity(HEADER + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&digest);
        out.extend_from_slice(&payload);
        (out, hex(&digest))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, String)> {
        if bytes.len() < HEADER || &bytes[..8] != MAGIC {
            return Err(Error::Corruption("not an archive (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Corruption(format!("unsupported archive version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let stored = &bytes[20..52];
        let payload = &bytes[HEADER..];
        if payload.len() != len {
            return Err(Error::Corruption(format!(
                "payload is {} bytes, header says {len}",
                payload.len()
            )));
        }
        let digest = Sha256::digest(payload);
        if digest.as_slice() != stored {
            return Err(Error::Corruption(format!(
                "content hash mismatch: stored {}, computed {}",
                hex(stored),
                hex(&digest)
            )));
        }
        let mut r = Reader { buf: payload, pos: 0 };
        let mut archive = Archive::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            archive.metadata.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Corruption("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Corruption(e.to_string()))?;
            archive.tensors.insert(name, t);
        }
        if r.pos != payload.len() {
            return Err(Error::Corruption("trailing bytes after archive payload".into()));
        }
        Ok((archive, hex(&digest)))
    }

    /// Write atomically; returns the content hash.
    pub fn save(&self, path: &Path) -> Result<String> {
        let (bytes, hash) = self.to_bytes();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let tmp = path.with_extension("partial");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(hash)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new();
        a.set_meta("C", 8);
        a.set_meta("stage", "stage1");
        a.insert("proj_c", &Tensor::<f32>::new([2, 2], vec![0.1, -2.5, 3.0, f32::MIN_POSITIVE]).unwrap());
        a.insert("scalar", &Tensor::<f64>::scalar(7.0));
        a
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let a = sample();
        let h1 = a.save(&path).unwrap();
        let (b, h2) = Archive::load(&path).unwrap();
        assert_eq!(a, b);
        assert_eq!(h1, h2);
        let t: Tensor<f32> = b.get("proj_c").unwrap();
        assert_eq!(t.data(), &[0.1, -2.5, 3.0, f32::MIN_POSITIVE]);
        assert_eq!(b.meta_parse::<usize>("C").unwrap(), 8);
    }

    #[test]
    fn flipped_byte_is_corruption() {
        let (mut bytes, _) = sample().to_bytes();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(Archive::from_bytes(&bytes), Err(Error::Corruption(_))));
        assert!(matches!(Archive::from_bytes(&bytes[..30]), Err(Error::Corruption(_))));
        assert!(matches!(Archive::from_bytes(b"nonsense"), Err(Error::Corruption(_))));
    }
}
