//! Binary checkpoint container.
//!
//! Layout (little endian): `"CKPT"`, `u32` version, `u32` metadata length,
//! UTF-8 JSON metadata, `u32` tensor count, then per tensor a `u32` name
//! length, the name, `u32` rank, `rank` dims as `u32` and the `f32` values.

use std::fs;
use std::path::Path;

use crate::corpus::format::{check_header, dim_u32, read_file, read_u32};
use crate::error::{Error, Result};
use crate::numkernel::RealMatrix;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CKPT";

pub fn encode_checkpoint(meta: &serde_json::Value, tensors: &[(String, RealMatrix)]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta)?;
    let mut out =
        Vec::with_capacity(16 + json.len() + tensors.iter().map(|(_, t)| 4 * t.data().len() + 32).sum::<usize>());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&crate::corpus::format::FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(json.len())?.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&dim_u32(tensors.len())?.to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&dim_u32(name.len())?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&dim_u32(t.rows())?.to_le_bytes());
        out.extend_from_slice(&dim_u32(t.cols())?.to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Malformed { path: self.path.to_path_buf(), reason: format!("truncated {what}") });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(read_u32(self.take(4, what)?, 0) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(serde_json::Value, Vec<(String, RealMatrix)>)> {
    let body = check_header(bytes, CHECKPOINT_MAGIC, 8, path)?;
    let mut c = Cursor { bytes: body, at: 0, path };
    let json_len = c.u32("metadata length")?;
    let meta = serde_json::from_slice(c.take(json_len, "metadata")?)?;
    let count = c.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = c.u32("tensor name length")?;
        let name = String::from_utf8(c.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| Error::Malformed { path: path.to_path_buf(), reason: "tensor name is not UTF-8".into() })?;
        let rank = c.u32("tensor rank")?;
        if rank == 0 || rank > 2 {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                reason: format!("tensor {name} has rank {rank}"),
            });
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32("tensor dims")?);
        }
        let (rows, cols) = if rank == 1 { (1, dims[0]) } else { (dims[0], dims[1]) };
        let n = rows.checked_mul(cols).ok_or_else(|| Error::Malformed {
            path: path.to_path_buf(),
            reason: format!("tensor {name} is too large"),
        })?;
        let remaining = (c.bytes.len() - c.at) / 4;
        if remaining < n {
            return Err(Error::LengthMismatch { declared: n, actual: remaining });
        }
        let raw = c.take(4 * n, "tensor data")?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        tensors.push((name, RealMatrix::from_vec(rows, cols, data)));
    }
    if c.at != c.bytes.len() {
        return Err(Error::Malformed { path: path.to_path_buf(), reason: "trailing bytes after last tensor".into() });
    }
    Ok((meta, tensors))
}

pub fn write_checkpoint(
    path: impl AsRef<Path>,
    meta: &serde_json::Value,
    tensors: &[(String, RealMatrix)],
) -> Result<()> {
    fs::write(path, encode_checkpoint(meta, tensors)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(serde_json::Value, Vec<(String, RealMatrix)>)> {
    let path = path.as_ref();
    decode_checkpoint(&read_file(path)?, path)
}
