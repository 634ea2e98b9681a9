//! Little-endian self-describing container shared by checkpoints, prune
//! plans and raw datasets.
//!
//! ```text
//! magic     4 bytes  "FCOS"
//! version   u32
//! desc_len  u64, then desc_len bytes of UTF-8 JSON (the descriptor)
//! count     u32 tensor records, each:
//!   name_len u32, name bytes
//!   dtype    u8   (0 = f32, 1 = f64, 2 = i64, 3 = u8)
//!   rank     u32, then rank x u64 dims
//!   payload  product(dims) x element size, little-endian
//! crc32     u32 over every byte between the version field and the crc
//! ```

use std::fs;
use std::path::Path;

use crate::error::{FcosError, Result};

pub const MAGIC: &[u8; 4] = b"FCOS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl RecordData {
    fn tag(&self) -> u8 {
        match self {
            RecordData::F32(_) => 0,
            RecordData::F64(_) => 1,
            RecordData::I64(_) => 2,
            RecordData::U8(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            RecordData::F32(v) => v.len(),
            RecordData::F64(v) => v.len(),
            RecordData::I64(v) => v.len(),
            RecordData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: RecordData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub descriptor: serde_json::Value,
    pub records: Vec<Record>,
}

impl Container {
    pub fn record(&self, name: &str) -> Result<&Record> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| FcosError::Malformed(format!("missing record '{name}'")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let desc = serde_json::to_vec(&self.descriptor).expect("descriptor serializes");
        out.extend_from_slice(&(desc.len() as u64).to_le_bytes());
        out.extend_from_slice(&desc);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.data.tag());
            out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
            for &d in &r.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &r.data {
                RecordData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                RecordData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                RecordData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                RecordData::U8(v) => out.extend_from_slice(v),
            }
        }
        let crc = crc32fast::hash(&out[8..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(FcosError::Truncated("shorter than the fixed header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(FcosError::Malformed("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(FcosError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < 12 {
            return Err(FcosError::Truncated("missing checksum".into()));
        }
        let body_end = bytes.len() - 4;
        let mut cur = Cursor {
            buf: &bytes[..body_end],
            pos: 8,
        };
        let desc_len = cur.u64()? as usize;
        let desc_bytes = cur.take(desc_len, "descriptor")?;
        let count = cur.u32()? as usize;
        let mut raw = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = cur.take(name_len, "record name")?;
            let tag = cur.take(1, "dtype tag")?[0];
            let rank = cur.u32()? as usize;
            if rank > 16 {
                return Err(FcosError::Malformed(format!("implausible rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cur.u64()? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| FcosError::Malformed("dims overflow".into()))?;
            let size = match tag {
                0 => 4,
                1 | 2 => 8,
                3 => 1,
                t => return Err(FcosError::Malformed(format!("unknown dtype tag {t}"))),
            };
            let nbytes = numel
                .checked_mul(size)
                .ok_or_else(|| FcosError::Malformed("payload overflow".into()))?;
            let payload = cur.take(nbytes, "payload")?;
            raw.push((name, tag, dims, payload));
        }
        if cur.pos != body_end {
            return Err(FcosError::Malformed(format!(
                "{} unexpected trailing bytes",
                body_end - cur.pos
            )));
        }
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[8..body_end]);
        if stored != computed {
            return Err(FcosError::Checksum { stored, computed });
        }
        let descriptor = serde_json::from_slice(desc_bytes)
            .map_err(|e| FcosError::Malformed(format!("descriptor: {e}")))?;
        let records = raw
            .into_iter()
            .map(|(name, tag, dims, payload)| {
                let name = String::from_utf8(name.to_vec())
                    .map_err(|_| FcosError::Malformed("record name is not UTF-8".into()))?;
                let data = match tag {
                    0 => RecordData::F32(
                        payload
                            .chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
                            .collect(),
                    ),
                    1 => RecordData::F64(
                        payload
                            .chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                            .collect(),
                    ),
                    2 => RecordData::I64(
                        payload
                            .chunks_exact(8)
                            .map(|c| i64::from_le_bytes(c.try_into().expect("8")))
                            .collect(),
                    ),
                    _ => RecordData::U8(payload.to_vec()),
                };
                Ok(Record { name, dims, data })
            })
            .collect::<Result<_>>()?;
        Ok(Container {
            descriptor,
            records,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| FcosError::io(dir, e))?;
            }
        }
        fs::write(path, self.encode()).map_err(|e| FcosError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| FcosError::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| FcosError::Truncated(format!("{what} runs past end of file")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, "u32 field")?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, "u64 field")?.try_into().expect("8")))
    }
}
