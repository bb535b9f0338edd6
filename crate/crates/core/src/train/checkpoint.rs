//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `ACWG`, version `u32`, config length `u32`
//! followed by that many bytes of JSON, then records until end of file:
//! name length `u32`, name bytes, dtype `u8` (0 = f32, 1 = u64), rank `u32`,
//! one `u64` per dimension, and the payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ACWG";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F32(Tensor),
    U64(Vec<u64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Configuration JSON, kept verbatim so re-saving is byte-identical.
    pub config_json: String,
    pub entries: Vec<(String, Entry)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.get(name) {
            Some(Entry::F32(t)) => Ok(t),
            Some(Entry::U64(_)) => Err(Error::Checkpoint(format!("'{name}' is not an f32 tensor"))),
            None => Err(Error::Checkpoint(format!("missing '{name}'"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name) {
            Some(Entry::U64(v)) => Ok(v),
            Some(Entry::F32(_)) => Err(Error::Checkpoint(format!("'{name}' is not a u64 record"))),
            None => Err(Error::Checkpoint(format!("missing '{name}'"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::F32(t) => {
                    out.push(0);
                    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for &v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::U64(v) => {
                    out.push(1);
                    out.extend_from_slice(&1u32.to_le_bytes());
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    for &x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, expected {VERSION}"
            )));
        }
        let len = r.u32()? as usize;
        let config_json = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let mut entries: Vec<(String, Entry)> = Vec::new();
        while r.pos < bytes.len() {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!("'{name}': rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("dimension overflow".into()))?);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("'{name}': size overflow")))?;
            let entry = match dtype {
                0 => {
                    let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    Entry::F32(
                        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("'{name}': {e}")))?,
                    )
                }
                1 => {
                    if rank != 1 {
                        return Err(Error::Checkpoint(format!("'{name}': u64 record of rank {rank}")));
                    }
                    let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
                    Entry::U64(
                        raw.chunks_exact(8)
                            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                other => return Err(Error::Checkpoint(format!("'{name}': unknown dtype {other}"))),
            };
            if entries.iter().any(|(n, _)| *n == name) {
                return Err(Error::Checkpoint(format!("duplicate record '{name}'")));
            }
            entries.push((name, entry));
        }
        Ok(Self {
            config_json,
            entries,
        })
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (needed {n} more)",
                self.pos
            )));
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
}
