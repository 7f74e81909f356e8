//! Linear probes on frozen representations: frame-level phone
//! classification and utterance-level speaker classification.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureSequence, Split};
use crate::error::{Error, Result};
use crate::numkernel::{column_means, gemm, RealMatrix};

pub const PROBE_RUNS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeTask {
    Phone,
    Speaker,
}

impl fmt::Display for ProbeTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeTask::Phone => "phone",
            ProbeTask::Speaker => "speaker",
        })
    }
}

/// Design matrix with one integer label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub x: RealMatrix,
    pub labels: Vec<u32>,
    pub num_classes: usize,
}

impl ProbeDataset {
    pub fn new(x: RealMatrix, labels: Vec<u32>, num_classes: usize) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(Error::Shape(format!("{} rows but {} labels", x.rows(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::InvalidInput(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self { x, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub runs: usize,
    /// Standardize inputs with training-set statistics.
    pub normalize: bool,
    /// Share of train-split utterances held out for phone-probe validation.
    pub valid_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 32, lr: 1e-4, runs: PROBE_RUNS, normalize: false, valid_fraction: 0.1 }
    }
}

/// Multinomial logistic regression `softmax(x·W + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub w: RealMatrix,
    pub b: Vec<f64>,
}

impl LinearClassifier {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self { w: RealMatrix::zeros(dim, classes), b: vec![0.0; classes] }
    }

    pub fn logits(&self, x: &RealMatrix) -> RealMatrix {
        let mut z = RealMatrix::zeros(x.rows(), self.w.cols());
        gemm(1.0, x, false, &self.w, false, 0.0, &mut z);
        for i in 0..z.rows() {
            for (v, b) in z.row_mut(i).iter_mut().zip(&self.b) {
                *v += b;
            }
        }
        z
    }

    /// Argmax class per row; ties go to the lowest index.
    pub fn predict(&self, x: &RealMatrix) -> Vec<u32> {
        let z = self.logits(x);
        (0..z.rows())
            .map(|i| {
                let mut best = 0;
                for (c, &v) in z.row(i).iter().enumerate() {
                    if v > z.row(i)[best] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect()
    }

    pub fn error_rate(&self, data: &ProbeDataset) -> f64 {
        error_rate(&self.predict(&data.x), &data.labels)
    }
}

pub fn error_rate(predicted: &[u32], labels: &[u32]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(labels).filter(|(p, l)| p != l).count() as f64 / labels.len() as f64
}

/// Plain minibatch SGD on mean softmax cross-entropy from zero weights.
/// Returns the weights of the epoch with the lowest validation error (the
/// earliest one on ties).
pub fn fit_logistic(
    train: &ProbeDataset,
    valid: &ProbeDataset,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<LinearClassifier> {
    if train.is_empty() {
        return Err(Error::InsufficientData("empty probe training set".into()));
    }
    if train.labels.iter().all(|&l| l == train.labels[0]) {
        return Err(Error::Degenerate("probe training set has a single class".into()));
    }
    if valid.x.cols() != train.x.cols() && !valid.is_empty() {
        return Err(Error::Shape(format!("train has {} dims, valid {}", train.x.cols(), valid.x.cols())));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("probe epochs and batch size must be positive".into()));
    }
    let (d, c) = (train.x.cols(), train.num_classes);
    let mut clf = LinearClassifier::zeros(d, c);
    let mut best = clf.clone();
    let mut best_err = f64::INFINITY;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xb = train.x.select_rows(batch);
            let mut g = clf.logits(&xb);
            for (r, &i) in batch.iter().enumerate() {
                let row = g.row_mut(r);
                let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
                row[train.labels[i] as usize] -= 1.0;
            }
            let scale = -cfg.lr / batch.len() as f64;
            gemm(scale, &xb, true, &g, false, 1.0, &mut clf.w);
            for r in 0..g.rows() {
                for (b, v) in clf.b.iter_mut().zip(g.row(r)) {
                    *b += scale * v;
                }
            }
        }
        let err = if valid.is_empty() { clf.error_rate(train) } else { clf.error_rate(valid) };
        if err < best_err {
            best_err = err;
            best = clf.clone();
        }
    }
    Ok(best)
}

/// One utterance's frozen representation with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeItem {
    pub id: String,
    pub rep: RealMatrix,
    pub speaker: String,
    pub phones: Option<Vec<u32>>,
    pub split: Split,
}

/// Pairs each utterance's representation with its speaker, phone labels
/// and split.
pub fn probe_items(seqs: &[FeatureSequence], splits: &[Split], reps: Vec<RealMatrix>) -> Result<Vec<ProbeItem>> {
    if seqs.len() != splits.len() || seqs.len() != reps.len() {
        return Err(Error::Shape(format!(
            "{} utterances, {} splits, {} representations",
            seqs.len(),
            splits.len(),
            reps.len()
        )));
    }
    Ok(seqs
        .iter()
        .zip(splits)
        .zip(reps)
        .map(|((s, &split), rep)| ProbeItem {
            id: s.utterance_id.clone(),
            rep,
            speaker: s.speaker_id.clone(),
            phones: s.phone_labels.clone(),
            split,
        })
        .collect())
}

fn stack_frames(items: &[&ProbeItem], num_phones: usize) -> Result<ProbeDataset> {
    let dim = items.first().map_or(0, |i| i.rep.cols());
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for it in items {
        let phones = it
            .phones
            .as_ref()
            .ok_or_else(|| Error::MissingLabels(format!("utterance {} has no phone labels", it.id)))?;
        if phones.len() != it.rep.rows() {
            return Err(Error::Shape(format!(
                "utterance {}: {} labels for {} frames",
                it.id,
                phones.len(),
                it.rep.rows()
            )));
        }
        data.extend_from_slice(it.rep.data());
        labels.extend_from_slice(phones);
    }
    ProbeDataset::new(RealMatrix::from_vec(labels.len(), dim, data), labels, num_phones)
}

/// Frame-level datasets: train-split utterances divided (by utterance,
/// seeded) into probe train/valid, and the test split.
pub fn phone_datasets(
    items: &[ProbeItem],
    num_phones: usize,
    valid_fraction: f64,
    seed: u64,
) -> Result<[ProbeDataset; 3]> {
    let mut train: Vec<&ProbeItem> = items.iter().filter(|i| i.split == Split::Train).collect();
    let test: Vec<&ProbeItem> = items.iter().filter(|i| i.split == Split::Test).collect();
    if train.len() < 2 || test.is_empty() {
        return Err(Error::InsufficientData("phone probe needs train and test utterances".into()));
    }
    train.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_valid = ((valid_fraction * train.len() as f64).round() as usize).clamp(1, train.len() - 1);
    let valid = train.split_off(train.len() - n_valid);
    Ok([stack_frames(&train, num_phones)?, stack_frames(&valid, num_phones)?, stack_frames(&test, num_phones)?])
}

/// Time average of each row block; the utterance-level probe input.
pub fn mean_pool(rep: &RealMatrix) -> Vec<f64> {
    column_means(rep)
}

/// Utterance-level datasets on the corpus splits, speakers indexed in
/// sorted order of the train split.
pub fn speaker_datasets(items: &[ProbeItem]) -> Result<([ProbeDataset; 3], Vec<String>)> {
    let speakers: Vec<String> = {
        let mut s: Vec<String> = items.iter().filter(|i| i.split == Split::Train).map(|i| i.speaker.clone()).collect();
        s.sort();
        s.dedup();
        s
    };
    let index: BTreeMap<&str, u32> = speakers.iter().enumerate().map(|(k, s)| (s.as_str(), k as u32)).collect();
    let build = |split: Split| -> Result<ProbeDataset> {
        let part: Vec<&ProbeItem> = items.iter().filter(|i| i.split == split).collect();
        let dim = items.first().map_or(0, |i| i.rep.cols());
        let mut data = Vec::with_capacity(part.len() * dim);
        let mut labels = Vec::with_capacity(part.len());
        for it in part {
            let label = *index.get(it.speaker.as_str()).ok_or_else(|| {
                Error::Contract(format!("speaker {:?} of {} is absent from the train split", it.speaker, it.id))
            })?;
            data.extend(mean_pool(&it.rep));
            labels.push(label);
        }
        ProbeDataset::new(RealMatrix::from_vec(labels.len(), dim, data), labels, speakers.len())
    };
    let sets = [build(Split::Train)?, build(Split::Valid)?, build(Split::Test)?];
    if sets[0].is_empty() || sets[2].is_empty() {
        return Err(Error::InsufficientData("speaker probe needs train and test utterances".into()));
    }
    Ok((sets, speakers))
}

/// Phone error of a fitted probe on frame-labelled test data.
pub fn eval_frame_probe(clf: &LinearClassifier, test: &[ProbeItem], num_phones: usize) -> Result<f64> {
    let refs: Vec<&ProbeItem> = test.iter().collect();
    Ok(clf.error_rate(&stack_frames(&refs, num_phones)?))
}

/// Speaker error over utterances, each mean-pooled before classification.
pub fn eval_utterance_probe(clf: &LinearClassifier, reps: &[&RealMatrix], labels: &[u32]) -> Result<f64> {
    if reps.len() != labels.len() {
        return Err(Error::Shape(format!("{} utterances but {} labels", reps.len(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= clf.w.cols()) {
        return Err(Error::Contract(format!("speaker class {bad} was not seen in training")));
    }
    let dim = clf.w.rows();
    let mut data = Vec::with_capacity(reps.len() * dim);
    for r in reps {
        if r.cols() != dim {
            return Err(Error::Shape(format!("representation width {} vs probe input {dim}", r.cols())));
        }
        data.extend(mean_pool(r));
    }
    let x = RealMatrix::from_vec(reps.len(), dim, data);
    Ok(error_rate(&clf.predict(&x), labels))
}

fn standardize(sets: &mut [ProbeDataset; 3]) {
    let means = column_means(&sets[0].x);
    let n = sets[0].x.rows().max(2) as f64;
    let mut sd = vec![0.0; means.len()];
    for i in 0..sets[0].x.rows() {
        for ((s, v), m) in sd.iter_mut().zip(sets[0].x.row(i)).zip(&means) {
            *s += (v - m).powi(2);
        }
    }
    for s in &mut sd {
        *s = (*s / (n - 1.0)).sqrt().max(1e-12);
    }
    for set in sets.iter_mut() {
        for i in 0..set.x.rows() {
            for ((v, m), s) in set.x.row_mut(i).iter_mut().zip(&means).zip(&sd) {
                *v = (*v - m) / s;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: ProbeTask,
    pub model: String,
    pub checkpoint: String,
    pub error_rate_mean: f64,
    pub error_rate_std: f64,
    pub seeds: Vec<u64>,
    pub run_errors: Vec<f64>,
    pub split_sizes: SplitSizes,
}

/// Fits `cfg.runs` probes with seeds `seed, seed+1, …` (in parallel) and
/// reports the mean and sample standard deviation of their test errors.
/// With `shuffle_labels`, training and validation labels are permuted
/// first as a chance-level control.
pub fn run_probe(
    task: ProbeTask,
    items: &[ProbeItem],
    num_phones: usize,
    cfg: &ProbeConfig,
    seed: u64,
    shuffle_labels: bool,
) -> Result<ProbeReport> {
    let mut sets = match task {
        ProbeTask::Phone => phone_datasets(items, num_phones, cfg.valid_fraction, seed)?,
        ProbeTask::Speaker => speaker_datasets(items)?.0,
    };
    if cfg.normalize {
        standardize(&mut sets);
    }
    if shuffle_labels {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        sets[0].labels.shuffle(&mut rng);
        sets[1].labels.shuffle(&mut rng);
    }
    let seeds: Vec<u64> = (0..cfg.runs as u64).map(|i| seed.wrapping_add(i)).collect();
    let run_errors = seeds
        .par_iter()
        .map(|&s| fit_logistic(&sets[0], &sets[1], cfg, s).map(|clf| clf.error_rate(&sets[2])))
        .collect::<Result<Vec<f64>>>()?;
    let (mean, std) = mean_std(&run_errors);
    Ok(ProbeReport {
        task,
        model: String::new(),
        checkpoint: String::new(),
        error_rate_mean: mean,
        error_rate_std: std,
        seeds,
        run_errors,
        split_sizes: SplitSizes { train: sets[0].len(), valid: sets[1].len(), test: sets[2].len() },
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(x: Vec<f64>, labels: Vec<u32>, c: usize) -> ProbeDataset {
        let n = labels.len();
        ProbeDataset::new(RealMatrix::from_vec(n, x.len() / n, x), labels, c).unwrap()
    }

    #[test]
    fn separable_one_dimensional_clusters() {
        let x: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let labels: Vec<u32> = (0..40).map(|i| (i % 2) as u32).collect();
        let train = ds(x, labels, 2);
        let clf = fit_logistic(&train, &train, &ProbeConfig::default(), 3).unwrap();
        assert_eq!(clf.error_rate(&train), 0.0);
    }

    #[test]
    fn identical_inputs_give_chance_error() {
        let c = 4;
        let train = ds(vec![1.0; 400], (0..400).map(|i| (i % c) as u32).collect(), c);
        let clf = fit_logistic(&train, &train, &ProbeConfig::default(), 0).unwrap();
        let err = clf.error_rate(&train);
        assert!((err - (1.0 - 1.0 / c as f64)).abs() <= 0.05, "{err}");
    }

    #[test]
    fn deterministic_per_seed() {
        let x: Vec<f64> = (0..200).map(|i| ((i * 37) % 11) as f64 / 5.0 - 1.0).collect();
        let train = ds(x, (0..100).map(|i| (i % 3) as u32).collect(), 3);
        let a = fit_logistic(&train, &train, &ProbeConfig::default(), 9).unwrap();
        let b = fit_logistic(&train, &train, &ProbeConfig::default(), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_class_is_degenerate() {
        let train = ds(vec![0.0, 1.0, 2.0], vec![1, 1, 1], 2);
        assert!(matches!(fit_logistic(&train, &train, &ProbeConfig::default(), 0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn counting_and_ties() {
        assert_eq!(error_rate(&[0, 0, 0, 0], &[0, 0, 1, 1]), 0.5);
        assert_eq!(error_rate(&[2, 1], &[2, 1]), 0.0);
        let clf = LinearClassifier::zeros(2, 3);
        assert_eq!(clf.predict(&RealMatrix::filled(2, 2, 1.0)), vec![0, 0]);
    }

    #[test]
    fn utterance_probe_behaviour() {
        let mut clf = LinearClassifier::zeros(1, 2);
        clf.w[(0, 1)] = 1.0;
        let a = RealMatrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]);
        let b = RealMatrix::from_vec(3, 1, vec![3.0, 1.0, 2.0]);
        assert_eq!(eval_utterance_probe(&clf, &[&a], &[1]).unwrap(), 0.0);
        assert_eq!(eval_utterance_probe(&clf, &[&a], &[0]).unwrap(), 1.0);
        assert_eq!(eval_utterance_probe(&clf, &[&b], &[1]).unwrap(), 0.0);
        assert!(matches!(eval_utterance_probe(&clf, &[&a], &[5]), Err(Error::Contract(_))));
    }

    #[test]
    fn unseen_test_speaker_and_missing_labels() {
        let item = |id: &str, spk: &str, split| ProbeItem {
            id: id.into(),
            rep: RealMatrix::filled(2, 1, 1.0),
            speaker: spk.into(),
            phones: None,
            split,
        };
        let items = vec![item("a", "s1", Split::Train), item("b", "s2", Split::Test)];
        assert!(matches!(speaker_datasets(&items), Err(Error::Contract(_))));
        let items = vec![item("a", "s1", Split::Train), item("c", "s1", Split::Train), item("b", "s1", Split::Test)];
        assert!(matches!(phone_datasets(&items, 3, 0.1, 0), Err(Error::MissingLabels(_))));
        let clf = LinearClassifier::zeros(1, 3);
        assert!(matches!(eval_frame_probe(&clf, &items, 3), Err(Error::MissingLabels(_))));
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    }
}
