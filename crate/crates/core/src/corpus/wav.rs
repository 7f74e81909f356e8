//! Minimal RIFF/WAVE reader for 16-bit PCM mono files.

use std::path::Path;

use crate::corpus::format::read_file;
use crate::error::{Error, Result};

/// Decoded waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    /// Samples scaled to `[-1, 1)`.
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    parse_wav(&read_file(path)?, path)
}

pub fn parse_wav(bytes: &[u8], path: &Path) -> Result<Waveform> {
    let malformed = |reason: &str| Error::Malformed { path: path.to_path_buf(), reason: reason.to_string() };
    if bytes.len() < 12 {
        return Err(malformed("truncated RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(malformed("not a RIFF/WAVE file"));
    }

    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes([bytes[pos + 4], bytes[pos + 5], bytes[pos + 6], bytes[pos + 7]]) as usize;
        let body_start = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body_start + 16 > bytes.len() {
                    return Err(malformed("truncated fmt chunk"));
                }
                let b = &bytes[body_start..];
                let tag = u16::from_le_bytes([b[0], b[1]]);
                let channels = u16::from_le_bytes([b[2], b[3]]);
                let rate = u32::from_le_bytes([b[4], b[5], b[6], b[7]]);
                let bits = u16::from_le_bytes([b[14], b[15]]);
                format = Some((tag, channels, rate, bits));
            }
            b"data" => {
                let (tag, channels, rate, bits) = format.ok_or_else(|| malformed("data chunk before fmt chunk"))?;
                if tag != 1 {
                    return Err(Error::UnsupportedEncoding(format!("format tag {tag} (only PCM=1)")));
                }
                if channels != 1 {
                    return Err(Error::UnsupportedEncoding(format!("{channels} channels (only mono)")));
                }
                if bits != 16 {
                    return Err(Error::UnsupportedEncoding(format!("{bits}-bit samples (only 16-bit)")));
                }
                let end = body_start + size;
                if end > bytes.len() || !size.is_multiple_of(2) {
                    return Err(malformed("truncated data chunk"));
                }
                let samples = bytes[body_start..end]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect();
                return Ok(Waveform { samples, sample_rate: rate });
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body_start + size + (size & 1);
    }
    Err(malformed(if format.is_some() { "missing data chunk" } else { "missing fmt chunk" }))
}

/// Encodes mono 16-bit PCM. Used by tests and fixtures.
pub fn encode_wav(samples: &[i16], sample_rate: u32) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.wav");
        std::fs::write(&p, encode_wav(&[0; 160], 16000)).unwrap();
        let w = read_wav(&p).unwrap();
        assert_eq!(w.sample_rate, 16000);
        assert_eq!(w.samples, vec![0.0; 160]);
    }

    #[test]
    fn int16_scaling() {
        let w = parse_wav(&encode_wav(&[32767], 8000), Path::new("m")).unwrap();
        assert!((w.samples[0] - 32767.0 / 32768.0).abs() < 1e-9);
        let w = parse_wav(&encode_wav(&[-32768], 8000), Path::new("m")).unwrap();
        assert_eq!(w.samples[0], -1.0);
    }

    #[test]
    fn error_paths() {
        let good = encode_wav(&[1, 2, 3], 16000);
        assert!(matches!(parse_wav(&good[..8], Path::new("m")), Err(Error::Malformed { .. })));
        assert!(matches!(parse_wav(&good[..30], Path::new("m")), Err(Error::Malformed { .. })));
        assert!(matches!(read_wav("/definitely/missing.wav"), Err(Error::MissingFile(_))));

        let mut stereo = good.clone();
        stereo[22] = 2;
        assert!(matches!(parse_wav(&stereo, Path::new("m")), Err(Error::UnsupportedEncoding(_))));
        let mut float = good.clone();
        float[20] = 3;
        assert!(matches!(parse_wav(&float, Path::new("m")), Err(Error::UnsupportedEncoding(_))));
    }
}
