//! Versioned binary container shared by link and ensemble models.
//!
//! Layout (all integers little-endian):
//! `"MTHG"`, u32 version, kind tag (u32 length + UTF-8), u32 hyperparameter
//! count + f64s, u32 channel count + (u32 length + UTF-8) names, u64
//! parameter count + f64s.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MTHG";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRecord {
    pub kind: String,
    pub hyperparams: Vec<f64>,
    pub channel_order: Vec<String>,
    pub params: Vec<f64>,
}

impl ModelRecord {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * (self.params.len() + self.hyperparams.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.extend_from_slice(&(self.hyperparams.len() as u32).to_le_bytes());
        for v in &self.hyperparams {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.channel_order.len() as u32).to_le_bytes());
        for c in &self.channel_order {
            put_str(&mut out, c);
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, source };
        if r.take(4)? != MAGIC {
            return Err(r.error_at(0, "bad magic, expected MTHG"));
        }
        let version = r.u32()?;
        if version != CONTAINER_VERSION {
            return Err(r.error_at(4, &format!("unsupported container version {version}")));
        }
        let kind = r.string()?;
        let n = r.u32()? as usize;
        let hyperparams = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let n = r.u32()? as usize;
        let channel_order = (0..n).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let n = r.u64()? as usize;
        if n > bytes.len() / 8 {
            return Err(r.error_at(r.pos, "parameter count exceeds file size"));
        }
        let params = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, "trailing bytes"));
        }
        Ok(Self {
            kind,
            hyperparams,
            channel_order,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!("expected model kind {kind}, found {}", self.kind)));
        }
        Ok(())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: usize, message: &str) -> Error {
        Error::Format {
            path: self.source.to_string(),
            offset: offset as u64,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error_at(self.bytes.len(), "truncated model container"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let start = self.pos;
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.error_at(start, "invalid UTF-8 string"))
    }
}
