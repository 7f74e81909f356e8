//! Binary feature (`FMAT`) and label (`LVEC`) files.
//!
//! Both start with a 4-byte magic and a little-endian `u32` version (1).
//! `FMAT` continues with `u32 rows`, `u32 cols` and `rows·cols` little-endian
//! `f32` values in row-major order. `LVEC` continues with `u32 length` and
//! that many `u32` class ids.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkernel::RealMatrix;

pub const FEATURE_MAGIC: [u8; 4] = *b"FMAT";
pub const LABEL_MAGIC: [u8; 4] = *b"LVEC";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_features(m: &RealMatrix) -> Result<Vec<u8>> {
    if !m.is_finite() {
        return Err(Error::InvalidInput("feature matrix contains non-finite values".into()));
    }
    let mut out = Vec::with_capacity(16 + 4 * m.data().len());
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(m.rows())?.to_le_bytes());
    out.extend_from_slice(&dim_u32(m.cols())?.to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<RealMatrix> {
    let body = check_header(bytes, FEATURE_MAGIC, 16, path)?;
    let rows = read_u32(bytes, 8) as usize;
    let cols = read_u32(bytes, 12) as usize;
    let declared = rows * cols;
    if body.len() % 4 != 0 || body.len() / 4 != declared {
        return Err(Error::LengthMismatch { declared, actual: body.len() / 4 });
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    RealMatrix::new(rows, cols, data)
}

pub fn write_features(path: impl AsRef<Path>, m: &RealMatrix) -> Result<()> {
    fs::write(path, encode_features(m)?)?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<RealMatrix> {
    let path = path.as_ref();
    decode_features(&read_file(path)?, path)
}

pub fn encode_labels(labels: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + 4 * labels.len());
    out.extend_from_slice(&LABEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(labels.len())?.to_le_bytes());
    for l in labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_labels(bytes: &[u8], path: &Path) -> Result<Vec<u32>> {
    let body = check_header(bytes, LABEL_MAGIC, 12, path)?;
    let declared = read_u32(bytes, 8) as usize;
    if body.len() % 4 != 0 || body.len() / 4 != declared {
        return Err(Error::LengthMismatch { declared, actual: body.len() / 4 });
    }
    Ok(body.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[u32]) -> Result<()> {
    fs::write(path, encode_labels(labels)?)?;
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let path = path.as_ref();
    decode_labels(&read_file(path)?, path)
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

pub(crate) fn check_header<'a>(bytes: &'a [u8], magic: [u8; 4], header_len: usize, path: &Path) -> Result<&'a [u8]> {
    if bytes.len() < 4 {
        return Err(Error::Malformed { path: path.to_path_buf(), reason: "file shorter than magic".into() });
    }
    let found = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if found != magic {
        return Err(Error::BadMagic { expected: magic, found });
    }
    if bytes.len() < header_len {
        return Err(Error::Malformed { path: path.to_path_buf(), reason: "truncated header".into() });
    }
    let version = read_u32(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    Ok(&bytes[header_len..])
}

pub(crate) fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

pub(crate) fn dim_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidInput(format!("dimension {n} exceeds u32")))
}
