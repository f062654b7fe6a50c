//! Binary tensor container: little-endian, magic `SHAT`, version 1, then
//! `(name, dims, f32 data)` records and a trailing CRC-32.

use std::collections::HashSet;
use std::path::Path;

use crate::error::CheckpointError;
use crate::tensor::{Real, Tensor};

use super::params::ModelParams;

pub const MAGIC: [u8; 4] = *b"SHAT";
pub const VERSION: u32 = 1;

/// Serializes named tensors as 32-bit floats, in the given order.
pub fn encode<'a, T: Real + 'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    end: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let available = self.end - self.pos;
        if n > available {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a container. Structure is validated before the checksum, so a
/// short file reports truncation rather than a checksum mismatch.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    // The last four bytes are the checksum; everything before is payload.
    let end = bytes.len().saturating_sub(4);
    let mut r = Reader {
        bytes,
        pos: 0,
        end: bytes.len(),
    };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch(version));
    }
    r.end = end.max(r.pos);
    let count = r.u32()?;
    let mut names = HashSet::new();
    let mut entries = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32()? as usize;
        let dims_bytes = r.take(rank.checked_mul(4).ok_or_else(|| r_overflow(rank))?)?;
        let dims: Vec<usize> = dims_bytes
            .chunks(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r_overflow(rank))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| r_overflow(rank))?)?;
        let data: Vec<f32> = raw
            .chunks(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !names.insert(name.clone()) {
            return Err(CheckpointError::DuplicateName(name));
        }
        let t = Tensor::new(dims, data).map_err(|e| CheckpointError::Malformed(format!("tensor `{name}`: {e}")))?;
        entries.push((name, t));
    }
    if r.pos != end {
        return Err(CheckpointError::Malformed(format!(
            "{} unexpected bytes before checksum",
            end - r.pos
        )));
    }
    r.end = bytes.len();
    let stored = r.u32()?;
    let computed = crc32fast::hash(&bytes[..end]);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    Ok(entries)
}

fn r_overflow(rank: usize) -> CheckpointError {
    CheckpointError::Malformed(format!("tensor extents overflow (rank {rank})"))
}

pub fn save_checkpoint<T: Real>(params: &ModelParams<T>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let bytes = encode(params.iter().map(|(k, v)| (k.as_str(), v)));
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams<f32>, CheckpointError> {
    let bytes = std::fs::read(path)?;
    let mut params = ModelParams::new();
    for (name, t) in decode(&bytes)? {
        params.insert(name, t).expect("names checked unique");
    }
    Ok(params)
}
