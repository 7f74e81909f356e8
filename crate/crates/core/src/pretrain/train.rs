use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusManifest, FeatureSequence, Split};
use crate::error::{Error, Result};
use crate::nn::params::AdamConfig;
use crate::pretrain::model::{Checkpoint, Model, ModelConfig, SeqBatch};

/// Frames per second of the feature front end.
pub const FRAME_RATE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Save every this many steps; `0` means epoch ends only.
    pub checkpoint_every: usize,
    /// Explicit checkpoint steps, overriding `checkpoint_every`.
    pub checkpoint_steps: Option<Vec<u64>>,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self { epochs: 10, batch_size: 32, lr: 1e-3, seed, checkpoint_every: 0, checkpoint_steps: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is not positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LossRecord>,
    pub checkpoints: Vec<Checkpoint>,
}

impl TrainOutcome {
    /// Mean batch loss of each epoch, in order.
    pub fn epoch_means(&self) -> Vec<f64> {
        epoch_means(&self.log)
    }
}

pub fn epoch_means(log: &[LossRecord]) -> Vec<f64> {
    let epochs = log.iter().map(|r| r.epoch).max().map_or(0, |e| e + 1);
    let mut sums = vec![(0.0, 0usize); epochs];
    for r in log {
        sums[r.epoch].0 += r.loss;
        sums[r.epoch].1 += 1;
    }
    sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
}

/// Steps per epoch for `n` utterances and batch size `b`.
pub fn steps_per_epoch(n: usize, b: usize) -> usize {
    n.div_ceil(b)
}

/// Checkpoint steps for a loss/error sweep: skip the first `burn_in`
/// fraction of `total` steps, then `count` evenly spaced steps ending at
/// `total`.
pub fn sweep_schedule(total: u64, burn_in: f64, count: usize) -> Vec<u64> {
    if count == 0 || total == 0 {
        return Vec::new();
    }
    let start = (burn_in * total as f64).round() as u64;
    let span = total.saturating_sub(start) as f64;
    let mut steps: Vec<u64> = (1..=count)
        .map(|i| start + (span * i as f64 / count as f64).round() as u64)
        .map(|s| s.clamp(1, total))
        .collect();
    steps.dedup();
    steps
}

/// Length-bucketed batches in a seeded random order. Utterances are shuffled,
/// stably sorted by length, cut into batches, and the batches shuffled.
pub fn bucketed_batches(lengths: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    idx.shuffle(rng);
    idx.sort_by_key(|&i| lengths[i]);
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

/// Trains a fresh model on `seqs`. Initial weights, batch order, masks and
/// negatives all derive from `tc.seed`.
pub fn train(config: &ModelConfig, seqs: &[FeatureSequence], tc: &TrainConfig) -> Result<TrainOutcome> {
    tc.validate()?;
    if seqs.is_empty() {
        return Err(Error::InsufficientData("no training utterances".into()));
    }
    let dim = config.input_dim();
    if let Some(s) = seqs.iter().find(|s| s.dim() != dim) {
        return Err(Error::Config(format!("utterance {} has {} dims, model expects {dim}", s.utterance_id, s.dim())));
    }
    let data_hours = seqs.iter().map(|s| s.len()).sum::<usize>() as f64 / FRAME_RATE / 3600.0;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut model = Model::new(config, rng.next_u64())?;
    model.store.round_to_f32();
    let adam = AdamConfig { lr: tc.lr, ..AdamConfig::default() };
    let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let per_epoch = steps_per_epoch(seqs.len(), tc.batch_size) as u64;

    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let (mut since_sum, mut since_n) = (0.0, 0usize);
    let mut step = 0u64;
    for epoch in 0..tc.epochs {
        for batch_idx in bucketed_batches(&lengths, tc.batch_size, &mut rng) {
            let members: Vec<&FeatureSequence> = batch_idx.iter().map(|&i| &seqs[i]).collect();
            let batch = SeqBatch::new(&members)?;
            let sample_seed = rng.next_u64();
            let (loss, grads) = model.loss_and_gradients(&batch, sample_seed)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("{} loss became {loss} at step {step}", config.name)));
            }
            model.store.adam_step(&grads, &adam)?;
            model.store.round_to_f32();
            step += 1;
            log.push(LossRecord { step, epoch, loss });
            since_sum += loss;
            since_n += 1;
            let due = match &tc.checkpoint_steps {
                Some(steps) => steps.contains(&step),
                None => match tc.checkpoint_every {
                    0 => step.is_multiple_of(per_epoch),
                    every => step.is_multiple_of(every as u64),
                },
            };
            if due {
                checkpoints.push(model.checkpoint(step, since_sum / since_n as f64, data_hours));
                since_sum = 0.0;
                since_n = 0;
            }
        }
        let mean = epoch_means(&log)[epoch];
        info!("{} epoch {}/{} mean loss {mean:.6}", config.name, epoch + 1, tc.epochs);
    }
    debug!("{} trained for {step} steps, {} checkpoints", config.name, checkpoints.len());
    Ok(TrainOutcome { model, log, checkpoints })
}

/// Loads the train split of `manifest` and trains on it.
pub fn train_manifest(config: &ModelConfig, manifest: &CorpusManifest, tc: &TrainConfig) -> Result<TrainOutcome> {
    let seqs = manifest.load_sequences(Some(Split::Train))?;
    if seqs.is_empty() {
        return Err(Error::InsufficientData("manifest has no train utterances".into()));
    }
    train(config, &seqs, tc)
}

/// Mean loss over fixed batches of `seqs` with seeds derived from `seed`,
/// used to score checkpoints on held-out data.
pub fn evaluate_loss(model: &Model, seqs: &[FeatureSequence], batch_size: usize, seed: u64) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::InsufficientData("no evaluation utterances".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let mut total = 0.0;
    let mut n = 0usize;
    for batch_idx in bucketed_batches(&lengths, batch_size, &mut rng) {
        let members: Vec<&FeatureSequence> = batch_idx.iter().map(|&i| &seqs[i]).collect();
        let batch = SeqBatch::new(&members)?;
        total += model.loss_value(&batch, rng.next_u64())? * members.len() as f64;
        n += members.len();
    }
    Ok(total / n as f64)
}

pub fn write_loss_log(path: impl AsRef<Path>, log: &[LossRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(loss_log_csv(log).as_bytes())?;
    Ok(())
}

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut s = String::from("step,epoch,loss\n");
    for r in log {
        s.push_str(&format!("{},{},{:.9}\n", r.step, r.epoch + 1, r.loss));
    }
    s
}
