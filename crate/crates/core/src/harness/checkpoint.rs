//! Binary checkpoints: a header with JSON metadata and a tensor table,
//! followed by row-major little-endian `f32` payloads.
//!
//! ```text
//! magic    8 bytes  "CLRCKPT\0"
//! version  u32
//! meta     u32 length + UTF-8 JSON
//! count    u32
//! table    count × { u16 name length, name, u8 rank, u32 dims…, u64 offset, u64 elements }
//! payload  f32 values; offsets are relative to the payload start
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CLRCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub elements: u64,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|rest| (rest.to_string(), t.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.metadata).map_err(|e| Error::Data(format!("metadata: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            if name.len() > u16::MAX as usize || t.shape().len() > u8::MAX as usize {
                return Err(Error::Data(format!("tensor name or rank too large: {name}")));
            }
            if !t.is_f32_exact() {
                return Err(Error::Numeric(format!("tensor {name} is not representable in f32")));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            offset += 4 * t.len() as u64;
        }
        for (_, t) in &self.tensors {
            for v in t.to_f32_vec() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (metadata, table, mut r) = read_header(bytes)?;
        let payload_start = r.pos;
        let mut tensors = Vec::with_capacity(table.len());
        for e in table {
            r.pos = payload_start + e.offset as usize;
            let raw = r.take(4 * e.elements as usize, "tensor payload")?;
            let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::from_f32(&e.shape, &values).map_err(|err| Error::Format {
                offset: (payload_start as u64) + e.offset,
                reason: format!("tensor {}: {err}", e.name),
            })?;
            tensors.push((e.name, t));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Metadata and tensor table without decoding payloads.
pub fn inspect(bytes: &[u8]) -> Result<(serde_json::Value, Vec<TableEntry>)> {
    let (meta, table, _) = read_header(bytes)?;
    Ok((meta, table))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            reason: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len().saturating_sub(self.pos)),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn read_header(bytes: &[u8]) -> Result<(serde_json::Value, Vec<TableEntry>, Reader<'_>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta_at = r.pos as u64;
    let metadata = serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| Error::Format {
        offset: meta_at,
        reason: format!("metadata is not valid JSON: {e}"),
    })?;
    let count = r.u32("tensor count")? as usize;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    let mut expected_offset = 0u64;
    for _ in 0..count {
        let entry_at = r.pos as u64;
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format {
                offset: entry_at + 2,
                reason: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let ndim = r.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("tensor dimension")? as usize);
        }
        let offset = r.u64("tensor offset")?;
        let elements = r.u64("tensor element count")?;
        let product: u64 = shape.iter().map(|&d| d as u64).product();
        if product != elements || offset != expected_offset {
            return Err(Error::Format {
                offset: entry_at,
                reason: format!("inconsistent table entry for {name}"),
            });
        }
        expected_offset += 4 * elements;
        table.push(TableEntry {
            name,
            shape,
            offset,
            elements,
        });
    }
    let payload_len = bytes.len().saturating_sub(r.pos) as u64;
    if payload_len != expected_offset {
        return Err(Error::Format {
            offset: (r.pos as u64) + payload_len.min(expected_offset),
            reason: format!("payload holds {payload_len} bytes, table describes {expected_offset}"),
        });
    }
    Ok((metadata, table, r))
}
