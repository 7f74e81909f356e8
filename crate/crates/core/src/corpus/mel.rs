//! Log-Mel spectrogram extraction (HTK mel scale, Hann window, power spectrum).

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::numkernel::RealMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { window_ms: 25.0, hop_ms: 10.0, n_mels: 80, floor: 1e-10 }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank spanning 0 Hz to Nyquist.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `n_mels × (n_fft/2 + 1)` weights.
    weights: RealMatrix,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let points: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect();
        let n_bins = n_fft / 2 + 1;
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let weights = RealMatrix::from_fn(n_mels, n_bins, |m, k| {
            let f = k as f64 * bin_hz;
            let (lo, c, hi) = (points[m], points[m + 1], points[m + 2]);
            let rise = (f - lo) / (c - lo);
            let fall = (hi - f) / (hi - c);
            rise.min(fall).max(0.0)
        });
        Self { weights, centers_hz: points[1..=n_mels].to_vec() }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn weights(&self) -> &RealMatrix {
        &self.weights
    }
}

/// `T × n_mels` natural-log mel energies with
/// `T = 1 + floor((N - window) / hop)`.
pub fn log_mel(samples: &[f64], sample_rate: u32, config: &MelConfig) -> Result<RealMatrix> {
    if sample_rate < 8000 {
        return Err(Error::InvalidInput(format!("sample rate {sample_rate} below 8000 Hz")));
    }
    let window = (sample_rate as f64 * config.window_ms / 1000.0).round() as usize;
    let hop = (sample_rate as f64 * config.hop_ms / 1000.0).round() as usize;
    if window == 0 || hop == 0 {
        return Err(Error::InvalidInput("window and hop must be non-empty".into()));
    }
    if samples.len() < window {
        return Err(Error::Degenerate(format!(
            "signal of {} samples is shorter than one {window}-sample window",
            samples.len()
        )));
    }
    let n_fft = window.next_power_of_two();
    let n_frames = 1 + (samples.len() - window) / hop;
    let bank = MelFilterbank::new(config.n_mels, n_fft, sample_rate);
    let hann: Vec<f64> =
        (0..window).map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / window as f64).cos()).collect();

    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let n_bins = n_fft / 2 + 1;
    let mut power = vec![0.0; n_bins];
    let mut out = RealMatrix::zeros(n_frames, config.n_mels);
    for t in 0..n_frames {
        let start = t * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < window { Complex::new(samples[start + i] * hann[i], 0.0) } else { Complex::new(0.0, 0.0) };
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for m in 0..config.n_mels {
            let energy: f64 = bank.weights.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
            out[(t, m)] = energy.max(config.floor).ln();
        }
    }
    Ok(out)
}

/// Per-utterance mean/variance normalization over time, per dimension.
pub fn normalize_mean_variance(frames: &RealMatrix) -> RealMatrix {
    let (t, d) = frames.shape();
    let mut out = frames.clone();
    for j in 0..d {
        let mean = (0..t).map(|i| frames[(i, j)]).sum::<f64>() / t as f64;
        let var = (0..t).map(|i| (frames[(i, j)] - mean).powi(2)).sum::<f64>() / t as f64;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        for i in 0..t {
            out[(i, j)] = (frames[(i, j)] - mean) * inv;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, amp: f64, n: usize, sr: u32) -> Vec<f64> {
        (0..n).map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin()).collect()
    }

    #[test]
    fn silence_hits_floor_everywhere() {
        let m = log_mel(&vec![0.0; 1600], 16000, &MelConfig::default()).unwrap();
        assert_eq!(m.shape(), (1 + (1600 - 400) / 160, 80));
        assert!(m.data().iter().all(|v| *v == 1e-10f64.ln()));
    }

    #[test]
    fn tone_peaks_at_nearest_center() {
        let m = log_mel(&tone(1000.0, 0.5, 4000, 16000), 16000, &MelConfig::default()).unwrap();
        let bank = MelFilterbank::new(80, 512, 16000);
        let nearest = bank
            .centers_hz()
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().partial_cmp(&(b.1 - 1000.0).abs()).unwrap())
            .unwrap()
            .0;
        for t in 0..m.rows() {
            let argmax = (0..80).max_by(|&a, &b| m[(t, a)].partial_cmp(&m[(t, b)]).unwrap()).unwrap();
            assert_eq!(argmax, nearest, "frame {t}");
        }
    }

    #[test]
    fn doubling_amplitude_adds_log4() {
        let cfg = MelConfig::default();
        let a = log_mel(&tone(440.0, 0.2, 3200, 16000), 16000, &cfg).unwrap();
        let b = log_mel(&tone(440.0, 0.4, 3200, 16000), 16000, &cfg).unwrap();
        let mut checked = 0;
        for (x, y) in a.data().iter().zip(b.data()) {
            if *x > cfg.floor.ln() + 1.0 {
                assert!((y - x - 4f64.ln()).abs() < 1e-6);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn shifting_by_one_hop_shifts_frames() {
        let sig: Vec<f64> = (0..4000).map(|i| ((i * 7919) % 1013) as f64 / 1013.0 - 0.5).collect();
        let cfg = MelConfig::default();
        let a = log_mel(&sig, 16000, &cfg).unwrap();
        let b = log_mel(&sig[160..], 16000, &cfg).unwrap();
        for t in 0..b.rows() {
            for j in 0..80 {
                assert!((a[(t + 1, j)] - b[(t, j)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn short_signal_rejected() {
        assert!(matches!(log_mel(&[0.0; 100], 16000, &MelConfig::default()), Err(Error::Degenerate(_))));
        assert!(matches!(log_mel(&[0.0; 1000], 4000, &MelConfig::default()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn htk_scale_round_trips() {
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-9);
        for hz in [0.0, 123.0, 1000.0, 7999.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
    }
}
