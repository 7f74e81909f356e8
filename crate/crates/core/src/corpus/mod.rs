//! Feature sequences, WAV ingestion, log-Mel extraction, the synthetic
//! corpus and the on-disk formats.

pub mod format;
pub mod manifest;
pub mod mel;
pub mod synth;
pub mod wav;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::RealMatrix;

pub use format::{read_features, read_labels, write_features, write_labels};
pub use manifest::{CorpusManifest, ManifestEntry, Split};
pub use mel::{log_mel, MelConfig};
pub use synth::{generate_synthetic_corpus, synthesize, SyntheticCorpus, SyntheticSpec};
pub use wav::{read_wav, Waveform};

/// One utterance: `T × dim` frames, its speaker and optional frame labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    pub utterance_id: String,
    pub frames: RealMatrix,
    pub speaker_id: String,
    pub phone_labels: Option<Vec<u32>>,
}

impl FeatureSequence {
    pub fn new(
        utterance_id: String,
        frames: RealMatrix,
        speaker_id: String,
        phone_labels: Option<Vec<u32>>,
    ) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(Error::Degenerate(format!("utterance {utterance_id} has no frames")));
        }
        if !frames.is_finite() {
            return Err(Error::InvalidInput(format!("utterance {utterance_id} has non-finite frames")));
        }
        if let Some(l) = &phone_labels {
            if l.len() != frames.rows() {
                return Err(Error::Shape(format!(
                    "utterance {utterance_id}: {} labels for {} frames",
                    l.len(),
                    frames.rows()
                )));
            }
        }
        Ok(Self { utterance_id, frames, speaker_id, phone_labels })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn check_labels(&self, num_phones: usize) -> Result<()> {
        match &self.phone_labels {
            Some(l) => match l.iter().find(|&&c| c as usize >= num_phones) {
                Some(bad) => Err(Error::InvalidInput(format!("label {bad} outside [0, {num_phones})"))),
                None => Ok(()),
            },
            None => Ok(()),
        }
    }
}
