//! Little-endian tensor container.
//!
//! ```text
//! "SQLF" | version u32 | kind (u32 len + utf8) | meta json (u32 len + utf8)
//! | count u32 | { name (u32 len + utf8) | ndim u32 | dims u64* | f64* } *
//! | crc32 u32
//! ```
//! The CRC covers every byte after the version field.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SQLF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Checkpoint {
            kind: kind.into(),
            meta: serde_json::Value::Null,
            tensors: Vec::new(),
        }
    }

    pub fn with_meta(mut self, meta: serde_json::Value) -> Self {
        self.meta = meta;
        self
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::data(format!("checkpoint of kind {} lacks tensor {name}", self.kind)))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::data(format!("expected a {kind} checkpoint, found {}", self.kind)))
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        fn put_str(out: &mut Vec<u8>, s: &str) {
            out.extend((s.len() as u32).to_le_bytes());
            out.extend(s.as_bytes());
        }
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.meta.to_string());
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend((t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[8..]);
        out.extend(crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err("bad magic".into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let body = &bytes[8..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err("CRC mismatch".into());
        }
        let mut r = Reader { buf: body, pos: 0 };
        let kind = r.string()?;
        let meta_text = r.string()?;
        let meta = serde_json::from_str(&meta_text).map_err(|e| format!("meta: {e}"))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or("shape overflow")?;
            let raw = r.take(n.checked_mul(8).ok_or("shape overflow")?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err("trailing bytes".into());
        }
        Ok(Checkpoint { kind, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let err = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
        Self::from_bytes(&bytes).map_err(err)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("test").with_meta(serde_json::json!({"k": 3}));
        c.push("w", Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        c.push("empty", Tensor::zeros(&[0, 4]));
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get("w").unwrap().data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn corruption_detected() {
        let mut b = sample().to_bytes();
        b[20] ^= 1;
        assert!(Checkpoint::from_bytes(&b).unwrap_err().contains("CRC"));
        let b = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 9]).is_err());
        let mut b = sample().to_bytes();
        b[0] = b'X';
        assert!(Checkpoint::from_bytes(&b).is_err());
    }
}
