//! Synthetic labeled corpus emitted directly in log-Mel-like feature space.
//!
//! Every phone class owns a fixed spectral prototype and every speaker a fixed
//! additive offset and per-dimension gain. A frame is
//! `prototype[phone] ⊙ gain[speaker] + offset[speaker] + N(0, σ²)`, with the
//! phone sequence drawn from a Markov chain whose self-transitions give
//! geometric durations.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::format::{write_features, write_labels};
use crate::corpus::manifest::{CorpusManifest, ManifestEntry, Split};
use crate::corpus::FeatureSequence;
use crate::error::{Error, Result};
use crate::numkernel::RealMatrix;

pub const DEFAULT_PHONES: usize = 42;
pub const DEFAULT_SPEAKERS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_speakers: usize,
    pub num_phones: usize,
    pub utterances_per_speaker: usize,
    /// Frames per second; used only to convert frame counts to hours.
    pub frame_rate: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub offset_scale: f64,
    pub gain_log_sigma: f64,
    /// Row-stochastic phone transition table.
    pub transitions: RealMatrix,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Defaults: 80 dims, 16–32 frames per utterance, σ = 0.1 and a transition
    /// table that stays on the current phone with probability 0.8.
    pub fn new(num_speakers: usize, num_phones: usize, utterances_per_speaker: usize, seed: u64) -> Self {
        Self {
            num_speakers,
            num_phones,
            utterances_per_speaker,
            frame_rate: 100.0,
            min_frames: 16,
            max_frames: 32,
            feature_dim: 80,
            noise_sigma: 0.1,
            offset_scale: 0.5,
            gain_log_sigma: 0.2,
            transitions: sticky_transitions(num_phones, 0.8),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_phones < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 phones, got {}", self.num_phones)));
        }
        if self.num_speakers < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 speakers, got {}", self.num_speakers)));
        }
        if self.utterances_per_speaker == 0 || self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::InvalidInput("utterance count and frame range must be non-empty".into()));
        }
        if self.feature_dim == 0 || !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidInput("feature_dim must be positive and noise_sigma non-negative".into()));
        }
        if self.transitions.shape() != (self.num_phones, self.num_phones) {
            return Err(Error::Shape(format!(
                "transition table is {:?}, expected {}x{}",
                self.transitions.shape(),
                self.num_phones,
                self.num_phones
            )));
        }
        for i in 0..self.num_phones {
            let row = self.transitions.row(i);
            if row.iter().any(|p| *p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!("transition row {i} is not a probability distribution")));
            }
        }
        Ok(())
    }
}

/// Self-loop probability `stay`, remaining mass spread evenly. Doubly
/// stochastic, so the stationary phone distribution is uniform.
pub fn sticky_transitions(num_phones: usize, stay: f64) -> RealMatrix {
    let off = if num_phones > 1 { (1.0 - stay) / (num_phones - 1) as f64 } else { 0.0 };
    RealMatrix::from_fn(num_phones, num_phones, |i, j| if i == j { stay } else { off })
}

/// Ground-truth generative parameters.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub prototypes: RealMatrix,
    pub offsets: RealMatrix,
    pub gains: RealMatrix,
}

#[derive(Debug, Clone)]
pub struct SyntheticUtterance {
    pub sequence: FeatureSequence,
    pub speaker_index: usize,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub world: SyntheticWorld,
    pub utterances: Vec<SyntheticUtterance>,
}

impl SyntheticCorpus {
    pub fn sequences(&self, split: Option<Split>) -> Vec<FeatureSequence> {
        self.utterances.iter().filter(|u| split.is_none_or(|s| u.split == s)).map(|u| u.sequence.clone()).collect()
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.sequence.len()).sum()
    }
}

pub fn speaker_name(s: usize) -> String {
    format!("spk{s:03}")
}

/// Draws the corpus in memory. Feature values are rounded to `f32` so the
/// in-memory corpus equals what the feature files hold.
pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let d = spec.feature_dim;

    let prototypes = RealMatrix::from_fn(spec.num_phones, d, |_, _| std.sample(&mut rng));
    let offsets = RealMatrix::from_fn(spec.num_speakers, d, |_, _| spec.offset_scale * std.sample(&mut rng));
    let gains = RealMatrix::from_fn(spec.num_speakers, d, |_, _| (spec.gain_log_sigma * std.sample(&mut rng)).exp());
    let world = SyntheticWorld { prototypes, offsets, gains };

    let mut utterances = Vec::with_capacity(spec.num_speakers * spec.utterances_per_speaker);
    for s in 0..spec.num_speakers {
        let splits = speaker_splits(spec.utterances_per_speaker, &mut rng);
        for (u, split) in splits.into_iter().enumerate() {
            let len = rng.random_range(spec.min_frames..=spec.max_frames);
            let mut phone = rng.random_range(0..spec.num_phones);
            let mut labels = Vec::with_capacity(len);
            let mut data = Vec::with_capacity(len * d);
            for t in 0..len {
                if t > 0 {
                    phone = sample_row(spec.transitions.row(phone), &mut rng);
                }
                labels.push(phone as u32);
                for j in 0..d {
                    let clean = world.prototypes[(phone, j)] * world.gains[(s, j)] + world.offsets[(s, j)];
                    let noise = if spec.noise_sigma > 0.0 { spec.noise_sigma * std.sample(&mut rng) } else { 0.0 };
                    data.push((clean + noise) as f32 as f64);
                }
            }
            let sequence = FeatureSequence::new(
                format!("{}_utt{u:04}", speaker_name(s)),
                RealMatrix::new(len, d, data)?,
                speaker_name(s),
                Some(labels),
            )?;
            utterances.push(SyntheticUtterance { sequence, speaker_index: s, split });
        }
    }
    Ok(SyntheticCorpus { spec: spec.clone(), world, utterances })
}

/// 80/10/10 per speaker, assigned in a seeded random order. Train always
/// receives at least one utterance.
pub fn speaker_splits(n: usize, rng: &mut ChaCha8Rng) -> Vec<Split> {
    let held = if n >= 3 { ((n as f64) * 0.1).round().max(1.0) as usize } else { 0 };
    let mut splits: Vec<Split> = (0..n)
        .map(|i| {
            if i < held {
                Split::Valid
            } else if i < 2 * held {
                Split::Test
            } else {
                Split::Train
            }
        })
        .collect();
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        splits.swap(i, j);
    }
    splits
}

fn sample_row(row: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.len() - 1
}

/// Writes `features/<id>.fmat`, `labels/<id>.lvec` and `manifest.jsonl`
/// under `out_dir`.
pub fn write_corpus(corpus: &SyntheticCorpus, out_dir: impl AsRef<Path>) -> Result<CorpusManifest> {
    let out = out_dir.as_ref();
    fs::create_dir_all(out.join("features"))?;
    fs::create_dir_all(out.join("labels"))?;
    let mut entries = Vec::with_capacity(corpus.utterances.len());
    for u in &corpus.utterances {
        let seq = &u.sequence;
        let feat_rel = Path::new("features").join(format!("{}.fmat", seq.utterance_id));
        write_features(out.join(&feat_rel), &seq.frames)?;
        let labels_rel = match &seq.phone_labels {
            Some(l) => {
                let rel = Path::new("labels").join(format!("{}.lvec", seq.utterance_id));
                write_labels(out.join(&rel), l)?;
                Some(rel)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: seq.utterance_id.clone(),
            features: feat_rel,
            speaker: seq.speaker_id.clone(),
            labels: labels_rel,
            split: u.split,
        });
    }
    let manifest = CorpusManifest::new(entries, out)?;
    manifest.save(out.join("manifest.jsonl"))?;
    Ok(manifest)
}

pub fn generate_synthetic_corpus(
    spec: &SyntheticSpec,
    out_dir: impl AsRef<Path>,
) -> Result<(CorpusManifest, SyntheticCorpus)> {
    let corpus = synthesize(spec)?;
    let manifest = write_corpus(&corpus, out_dir)?;
    Ok((manifest, corpus))
}
