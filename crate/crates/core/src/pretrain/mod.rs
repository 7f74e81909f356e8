//! Self-supervised objectives over the nine-model grid, the training loop,
//! checkpoints and representation extraction.

pub mod model;
pub mod objectives;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

pub use model::{Checkpoint, FrameEncoderKind, Model, ModelConfig, SeqBatch, MODEL_NAMES};
pub use objectives::{ObjectiveConfig, Proposal};
pub use train::{evaluate_loss, sweep_schedule, train, train_manifest, LossRecord, TrainConfig, TrainOutcome};

use crate::corpus::format::write_features;
use crate::corpus::{CorpusManifest, FeatureSequence, ManifestEntry, Split};
use crate::error::Result;
use crate::nn::encoder::FEATURE_DIM;
use crate::nn::GradCheckReport;
use crate::numkernel::RealMatrix;

/// Utterances encoded together during extraction.
pub const EXTRACT_CHUNK: usize = 32;

/// Per-utterance representations, one `T × d` matrix per input sequence.
pub fn extract_representations(ckpt: &Checkpoint, seqs: &[FeatureSequence]) -> Result<Vec<RealMatrix>> {
    let model = Model::from_checkpoint(ckpt)?;
    let mats: Vec<&RealMatrix> = seqs.iter().map(|s| &s.frames).collect();
    model.extract(&mats, EXTRACT_CHUNK)
}

/// Extracts one split of `manifest` and writes each utterance's matrix to
/// `out_dir/features/<id>.fmat`, returning the sidecar manifest (labels
/// and speakers carried over, paths relative to `out_dir`).
pub fn extract_to_dir(
    ckpt: &Checkpoint,
    manifest: &CorpusManifest,
    split: Option<Split>,
    out_dir: impl AsRef<Path>,
) -> Result<CorpusManifest> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir.join("features"))?;
    let entries: Vec<&ManifestEntry> = manifest.entries.iter().filter(|e| split.is_none_or(|s| e.split == s)).collect();
    let seqs = entries.iter().map(|e| manifest.load_entry(e)).collect::<Result<Vec<_>>>()?;
    let reps = extract_representations(ckpt, &seqs)?;
    let mut out = Vec::with_capacity(entries.len());
    for (e, rep) in entries.iter().zip(&reps) {
        let rel = PathBuf::from("features").join(format!("{}.fmat", e.id));
        write_features(out_dir.join(&rel), rep)?;
        out.push(ManifestEntry {
            id: e.id.clone(),
            features: rel,
            speaker: e.speaker.clone(),
            labels: e.labels.as_ref().map(|p| manifest.resolve(p)),
            split: e.split,
        });
    }
    let m = CorpusManifest::new(out, out_dir)?;
    m.save(out_dir.join("manifest.jsonl"))?;
    Ok(m)
}

/// Finite-difference check of one grid model on a random batch of
/// `batch` utterances with `frames` frames each. Within-utterance CPC
/// draws at most `frames − horizon − 1` negatives so every anchor can be
/// scored.
pub fn grad_check_model(
    name: &str,
    hidden: usize,
    frames: usize,
    batch: usize,
    seed: u64,
    step: f64,
) -> Result<GradCheckReport> {
    use rand::{Rng, SeedableRng};
    let mut cfg = ModelConfig::from_name(name, hidden)?;
    if let ObjectiveConfig::Cpc { horizon, negatives, proposal: Proposal::WithinSpk } = &mut cfg.objective {
        *negatives = (*negatives).min(frames.saturating_sub(*horizon + 1)).max(1);
    }
    let mut model = Model::new(&cfg, seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mats: Vec<RealMatrix> =
        (0..batch).map(|_| RealMatrix::from_fn(frames, FEATURE_DIM, |_, _| rng.random_range(-1.0..1.0))).collect();
    let batch = SeqBatch::from_matrices(&mats.iter().collect::<Vec<_>>())?;
    model.grad_check(&batch, seed.wrapping_add(1), step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::nn::encoder::FEATURE_DIM;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_seqs(lengths: &[usize], seed: u64) -> Vec<FeatureSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        lengths
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let frames = RealMatrix::from_fn(l, FEATURE_DIM, |_, _| rng.random_range(-1.0..1.0));
                FeatureSequence::new(format!("u{i}"), frames, format!("s{}", i % 2), None).unwrap()
            })
            .collect()
    }

    #[test]
    fn every_name_builds_with_expected_output_dim() {
        for name in MODEL_NAMES {
            let cfg = ModelConfig::from_name(name, 16).unwrap();
            assert_eq!(cfg.output_dim(), 16, "{name}");
            let model = Model::new(&cfg, 1).unwrap();
            let seqs = toy_seqs(&[5, 3], 2);
            let mats: Vec<&RealMatrix> = seqs.iter().map(|s| &s.frames).collect();
            let reps = model.extract(&mats, 32).unwrap();
            assert_eq!(reps[0].shape(), (5, 16), "{name}");
            assert_eq!(reps[1].shape(), (3, 16), "{name}");
        }
        assert!(matches!(ModelConfig::from_name("apc-bw-rnn", 16), Err(Error::Config(_))));
        assert!(matches!(ModelConfig::from_name("mpc-birnn", 15), Err(Error::Config(_))));
    }

    #[test]
    fn split_models_concatenate_directions() {
        let cfg = ModelConfig::from_name("apc-fw+bw-rnn", 16).unwrap();
        assert_eq!(cfg.encoder.hidden, 8);
        let model = Model::new(&cfg, 3).unwrap();
        let seqs = toy_seqs(&[6], 4);
        let full = model.extract(&[&seqs[0].frames], 1).unwrap().remove(0);
        // The forward half at t ignores frames after t; the backward half
        // at t ignores frames before t.
        let mut changed = seqs[0].frames.clone();
        changed[(5, 0)] += 1.0;
        let after = model.extract(&[&changed], 1).unwrap().remove(0);
        for t in 0..5 {
            assert_eq!(&full.row(t)[..8], &after.row(t)[..8]);
        }
        let mut early = seqs[0].frames.clone();
        early[(0, 0)] += 1.0;
        let after = model.extract(&[&early], 1).unwrap().remove(0);
        for t in 1..6 {
            assert_eq!(&full.row(t)[8..], &after.row(t)[8..]);
        }
    }

    #[test]
    fn forward_models_are_causal() {
        for name in ["apc-fw-rnn", "apc-fw-trf", "cpc-mixed_spk-rnn", "cpc-within_spk-rnn", "cpc-within_spk-cnn"] {
            let model = Model::new(&ModelConfig::from_name(name, 8).unwrap(), 5).unwrap();
            let seqs = toy_seqs(&[7], 6);
            let base = model.extract(&[&seqs[0].frames], 1).unwrap().remove(0);
            let mut x = seqs[0].frames.clone();
            x[(4, 3)] -= 2.0;
            let out = model.extract(&[&x], 1).unwrap().remove(0);
            assert_eq!(base.slice_rows(0, 4), out.slice_rows(0, 4), "{name}");
        }
    }

    #[test]
    fn extraction_is_independent_of_chunking_and_dim_checked() {
        let model = Model::new(&ModelConfig::from_name("mpc-trf", 8).unwrap(), 7).unwrap();
        let seqs = toy_seqs(&[4, 9, 2, 6], 8);
        let mats: Vec<&RealMatrix> = seqs.iter().map(|s| &s.frames).collect();
        let a = model.extract(&mats, 1).unwrap();
        let b = model.extract(&mats, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.sub(y).max_abs() < 1e-12);
        }
        let narrow = RealMatrix::zeros(3, 40);
        assert!(matches!(model.extract(&[&narrow], 1), Err(Error::Config(_))));
    }

    #[test]
    fn gradients_match_finite_differences_on_small_models() {
        for name in ["apc-fw+bw-rnn", "mpc-trf", "cpc-mixed_spk-rnn"] {
            let mut cfg = ModelConfig::from_name(name, 4).unwrap();
            cfg.encoder.layers = 1;
            if let ObjectiveConfig::Cpc { negatives, .. } = &mut cfg.objective {
                *negatives = 3;
            }
            let mut model = Model::new(&cfg, 9).unwrap();
            let seqs = toy_seqs(&[6, 5], 10);
            let batch = SeqBatch::new(&seqs.iter().collect::<Vec<_>>()).unwrap();
            let report = model.grad_check(&batch, 11, 1e-5).unwrap();
            assert!(report.passes(1e-4), "{name}: {:?}", report.worst());
        }
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_reload_exactly() {
        let cfg = ModelConfig::from_name("apc-fw-rnn", 8).unwrap();
        let seqs = toy_seqs(&[8, 9, 10, 8, 7, 12], 12);
        let tc = TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::new(5) };
        let a = train(&cfg, &seqs, &tc).unwrap();
        let b = train(&cfg, &seqs, &tc).unwrap();
        assert_eq!(train::loss_log_csv(&a.log), train::loss_log_csv(&b.log));
        assert_eq!(a.log.len(), 4);
        assert_eq!(a.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(), vec![2, 4]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let last = a.checkpoints.last().unwrap();
        last.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(&loaded, last);
        let direct = a.model.extract(&[&seqs[0].frames], 1).unwrap();
        let reloaded = extract_representations(&loaded, &seqs[..1]).unwrap();
        assert_eq!(direct, reloaded);
    }

    #[test]
    fn sweep_schedule_shape() {
        let s = sweep_schedule(200, 0.1, 15);
        assert_eq!(s.len(), 15);
        assert_eq!(*s.last().unwrap(), 200);
        assert!(s[0] > 20 && s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn mixed_proposal_rejects_single_utterance_batches() {
        let model = Model::new(&ModelConfig::from_name("cpc-mixed_spk-rnn", 8).unwrap(), 1).unwrap();
        let seqs = toy_seqs(&[20], 2);
        let batch = SeqBatch::new(&[&seqs[0]]).unwrap();
        assert!(matches!(model.loss_value(&batch, 0), Err(Error::ProposalUnsatisfiable(_))));
    }
}
