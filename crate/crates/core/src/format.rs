//! Little-endian binary layouts for feature files and embedding caches.
//!
//! Feature file: `"SBFT"`, version `u32`, `n_frames u32`, `dim u32`, then
//! `n_frames * dim` `f32` values row-major.
//!
//! Cache file: `"SBEC"`, version `u32`, entry count `u64`, embedding dimension
//! `u32`, then per entry: id length `u16`, UTF-8 id, start `u32`, end `u32`,
//! `dim` `f32` values.

use crate::corpus::FrameSequence;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"SBFT";
pub const CACHE_MAGIC: &[u8; 4] = b"SBEC";
pub const FORMAT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
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

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode_features(seq: &FrameSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + seq.data().len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(seq.n_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(seq.dim() as u32).to_le_bytes());
    for &v in seq.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Returns `(n_frames, dim, values)`.
pub fn decode_features(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let mut r = Reader::new(bytes);
    r.expect_magic(FEATURE_MAGIC)?;
    let n_frames = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if n_frames == 0 || dim == 0 {
        return Err(Error::Format(format!("empty feature matrix {n_frames}x{dim}")));
    }
    let count = n_frames
        .checked_mul(dim)
        .ok_or_else(|| Error::Format("feature matrix too large".into()))?;
    let expected = count.checked_mul(4).unwrap_or(usize::MAX);
    if bytes.len() - r.pos != expected {
        return Err(Error::Format(format!(
            "header says {n_frames}x{dim} but payload has {} bytes",
            bytes.len() - r.pos
        )));
    }
    let values = (0..count).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok((n_frames, dim, values))
}

/// One decoded cache entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheRecord {
    pub utterance_id: String,
    pub start: u32,
    pub end: u32,
    pub values: Vec<f32>,
}

pub fn encode_cache<'a, I>(dim: usize, count: usize, records: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = (&'a str, u32, u32, &'a [f64])>,
{
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(count as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    let mut written = 0usize;
    for (id, start, end, values) in records {
        let id_len = u16::try_from(id.len())
            .map_err(|_| Error::Format(format!("utterance id '{id}' longer than 65535 bytes")))?;
        if values.len() != dim {
            return Err(Error::Format(format!(
                "embedding of length {} in a dimension {dim} cache",
                values.len()
            )));
        }
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.extend_from_slice(&start.to_le_bytes());
        out.extend_from_slice(&end.to_le_bytes());
        for &v in values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        written += 1;
    }
    if written != count {
        return Err(Error::Format(format!(
            "declared {count} cache entries but wrote {written}"
        )));
    }
    Ok(out)
}

/// Returns `(dim, records)`.
pub fn decode_cache(bytes: &[u8]) -> Result<(usize, Vec<CacheRecord>)> {
    let mut r = Reader::new(bytes);
    r.expect_magic(CACHE_MAGIC)?;
    let count = r.u64()?;
    let dim = r.u32()? as usize;
    let mut records = Vec::new();
    for _ in 0..count {
        let id_len = r.u16()? as usize;
        let utterance_id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|e| Error::Format(format!("utterance id is not utf-8: {e}")))?
            .to_owned();
        let start = r.u32()?;
        let end = r.u32()?;
        let values = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        records.push(CacheRecord {
            utterance_id,
            start,
            end,
            values,
        });
    }
    r.finish()?;
    Ok((dim, records))
}
