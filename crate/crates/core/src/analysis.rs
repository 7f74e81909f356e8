//! Loss/error correlation over checkpoint sweeps and the data-scaling
//! similarity study.

use std::fmt::Write as _;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureSequence, Split};
use crate::error::{Error, Result};
use crate::pretrain::train::FRAME_RATE;
use crate::pretrain::{evaluate_loss, extract_representations, train, Checkpoint, ModelConfig, TrainConfig};
use crate::probe::{probe_items, run_probe, ProbeConfig, ProbeTask};
use crate::similarity::{lincka, pool_frames, Provenance, DEFAULT_MAX_FRAMES};

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("pearson_r over {} and {} values", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::InsufficientData(format!("pearson_r needs at least 3 pairs, got {}", xs.len())));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("pearson_r of a constant vector".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Lanczos approximation (g = 7, nine terms) of ln Γ(x) for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function, evaluated with the
/// modified Lentz method.
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// Two-tailed p-value of a Pearson correlation `r` over `n` pairs, from
/// Student's t with `n − 2` degrees of freedom.
pub fn significance(r: f64, n: usize) -> Result<f64> {
    if n < 3 {
        return Err(Error::InsufficientData(format!("significance needs n >= 3, got {n}")));
    }
    if !r.is_finite() {
        return Err(Error::Numerical(format!("correlation {r} is not finite")));
    }
    let r = r.clamp(-1.0, 1.0);
    if r.abs() == 1.0 {
        return Ok(0.0);
    }
    let df = (n - 2) as f64;
    let t2 = r * r * df / (1.0 - r * r);
    Ok(regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t2)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
    pub significant: bool,
}

impl CorrelationResult {
    pub fn from_r(r: f64, n: usize) -> Result<Self> {
        let p_value = significance(r, n)?;
        Ok(Self { r, p_value, n, significant: p_value < SIGNIFICANCE_LEVEL })
    }

    pub fn compute(xs: &[f64], ys: &[f64]) -> Result<Self> {
        Self::from_r(pearson_r(xs, ys)?, xs.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub checkpoint: String,
    pub loss: f64,
    pub phone_error: f64,
    pub speaker_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub model: String,
    /// Ordered by ascending loss.
    pub points: Vec<SweepPoint>,
    pub phone: CorrelationResult,
    pub speaker: CorrelationResult,
}

impl SweepResult {
    /// Sorts the points and correlates loss with each error column.
    pub fn from_points(model: impl Into<String>, mut points: Vec<SweepPoint>) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| !p.loss.is_finite()) {
            return Err(Error::Numerical(format!("checkpoint {} has loss {}", p.checkpoint, p.loss)));
        }
        points.sort_by(|a, b| a.loss.total_cmp(&b.loss));
        let loss: Vec<f64> = points.iter().map(|p| p.loss).collect();
        let phone: Vec<f64> = points.iter().map(|p| p.phone_error).collect();
        let speaker: Vec<f64> = points.iter().map(|p| p.speaker_error).collect();
        let model = model.into();
        let correlate = |task: &str, err: &[f64]| {
            CorrelationResult::compute(&loss, err).map_err(|e| match e {
                Error::Degenerate(m) => Error::Degenerate(format!("{model} {task} sweep: {m}")),
                other => other,
            })
        };
        Ok(Self { phone: correlate("phone", &phone)?, speaker: correlate("speaker", &speaker)?, model, points })
    }

    pub fn table_csv(&self) -> String {
        let mut s = String::from("checkpoint,loss,phone_err,speaker_err\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{:.9},{:.6},{:.6}", p.checkpoint, p.loss, p.phone_error, p.speaker_error);
        }
        s
    }

    pub fn summary_rows(&self) -> String {
        let mut s = String::new();
        for (task, c) in [(ProbeTask::Phone, &self.phone), (ProbeTask::Speaker, &self.speaker)] {
            let _ = writeln!(s, "{},{task},{:.6},{:.6e},{},{}", self.model, c.r, c.p_value, c.n, c.significant);
        }
        s
    }
}

pub const SUMMARY_HEADER: &str = "model,task,r,p,n,significant\n";

/// Sweep whose errors are exact increasing affine functions of loss.
pub fn affine_fixture(n: usize, seed: u64) -> Vec<SweepPoint> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let loss = 2.0 - i as f64 / n.max(1) as f64 + rng.random_range(0.0..0.01);
            SweepPoint {
                checkpoint: format!("fixture@{}", i + 1),
                loss,
                phone_error: 0.2 * loss - 0.1,
                speaker_error: 0.25 * loss - 0.2,
            }
        })
        .collect()
}

/// Sweep whose errors are Gaussian noise independent of loss.
pub fn noise_fixture(n: usize, seed: u64) -> Vec<SweepPoint> {
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::<f64>::new(0.0, 0.02).expect("positive scale");
    (0..n)
        .map(|i| {
            let loss = 2.0 - i as f64 / n.max(1) as f64 + rng.random_range(0.0..0.01);
            SweepPoint {
                checkpoint: format!("fixture@{}", i + 1),
                loss,
                phone_error: (0.3 + noise.sample(&mut rng)).clamp(0.0, 1.0),
                speaker_error: (0.1 + noise.sample(&mut rng)).clamp(0.0, 1.0),
            }
        })
        .collect()
}

/// Labelled utterances used to probe each checkpoint.
#[derive(Debug, Clone)]
pub struct ProbeCorpus {
    pub seqs: Vec<FeatureSequence>,
    pub splits: Vec<Split>,
    pub num_phones: usize,
}

impl ProbeCorpus {
    /// Phone and speaker probe reports on representations from `ckpt`.
    pub fn evaluate(&self, ckpt: &Checkpoint, cfg: &ProbeConfig, seed: u64) -> Result<[crate::probe::ProbeReport; 2]> {
        let reps = extract_representations(ckpt, &self.seqs)?;
        let items = probe_items(&self.seqs, &self.splits, reps)?;
        let mut out = [
            run_probe(ProbeTask::Phone, &items, self.num_phones, cfg, seed, false)?,
            run_probe(ProbeTask::Speaker, &items, self.num_phones, cfg, seed, false)?,
        ];
        for r in &mut out {
            r.model = ckpt.config.name.clone();
            r.checkpoint = ckpt.id();
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub probe: ProbeConfig,
    pub seed: u64,
    pub eval_batch: usize,
}

/// Scores every checkpoint by held-out pre-training loss on `eval` (or the
/// recorded running loss when `eval` is empty) and by both probe errors,
/// then correlates loss with error.
pub fn checkpoint_sweep(
    ckpts: &[Checkpoint],
    probe: &ProbeCorpus,
    eval: &[FeatureSequence],
    cfg: &SweepConfig,
) -> Result<SweepResult> {
    if ckpts.len() < 3 {
        return Err(Error::InsufficientData(format!("sweep needs at least 3 checkpoints, got {}", ckpts.len())));
    }
    let model = ckpts[0].config.name.clone();
    let points = ckpts
        .par_iter()
        .map(|ckpt| {
            let loss = if eval.is_empty() {
                ckpt.running_loss
            } else {
                evaluate_loss(&crate::pretrain::Model::from_checkpoint(ckpt)?, eval, cfg.eval_batch, cfg.seed)?
            };
            let [phone, speaker] = probe.evaluate(ckpt, &cfg.probe, cfg.seed)?;
            info!(
                "{}: loss {loss:.5} phone {:.4} speaker {:.4}",
                ckpt.id(),
                phone.error_rate_mean,
                speaker.error_rate_mean
            );
            Ok(SweepPoint {
                checkpoint: ckpt.id(),
                loss,
                phone_error: phone.error_rate_mean,
                speaker_error: speaker.error_rate_mean,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SweepResult::from_points(model, points)
}

/// Splits `seqs` into nested training sets: size `m` keeps, per speaker,
/// the first `m/max(multipliers)` share of that speaker's utterances.
pub fn nested_subsets(seqs: &[FeatureSequence], multipliers: &[usize]) -> Result<Vec<Vec<FeatureSequence>>> {
    let top = *multipliers.iter().max().ok_or_else(|| Error::Config("no data sizes given".into()))?;
    if multipliers.windows(2).any(|w| w[0] >= w[1]) || multipliers[0] == 0 {
        return Err(Error::Config(format!("data sizes {multipliers:?} must be positive and strictly increasing")));
    }
    let mut speakers: Vec<&str> = Vec::new();
    for s in seqs {
        if !speakers.contains(&s.speaker_id.as_str()) {
            speakers.push(&s.speaker_id);
        }
    }
    let by_speaker: Vec<Vec<&FeatureSequence>> =
        speakers.iter().map(|spk| seqs.iter().filter(|s| s.speaker_id == *spk).collect()).collect();
    multipliers
        .iter()
        .map(|&m| {
            let subset: Vec<FeatureSequence> = by_speaker
                .iter()
                .flat_map(|utts| {
                    let keep = (utts.len() * m).div_ceil(top).min(utts.len());
                    utts[..keep].iter().map(|s| (*s).clone())
                })
                .collect();
            if subset.is_empty() {
                return Err(Error::InsufficientData(format!("data size {m}x of {top}x is empty")));
            }
            Ok(subset)
        })
        .collect()
}

pub fn hours(seqs: &[FeatureSequence]) -> f64 {
    seqs.iter().map(|s| s.len()).sum::<usize>() as f64 / FRAME_RATE / 3600.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub model: String,
    pub reference_hours: f64,
    pub hours: Vec<f64>,
    pub similarity: Vec<f64>,
    pub phone_error: Vec<f64>,
    pub speaker_error: Vec<f64>,
}

impl ScalingRow {
    /// True when similarity to the reference never increases with size.
    pub fn decreasing(&self) -> bool {
        self.similarity.windows(2).all(|w| w[1] <= w[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    pub max_frames: usize,
    pub pooling_seed: u64,
    pub probe: ProbeConfig,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self { max_frames: DEFAULT_MAX_FRAMES, pooling_seed: 0, probe: ProbeConfig::default() }
    }
}

/// Trains `config` on the reference set and on every larger set, compares
/// each larger model with the reference model by lincka on `eval` frames,
/// and probes each larger model when `probe` is given.
pub fn data_scaling_study(
    config: &ModelConfig,
    reference: &[FeatureSequence],
    sizes: &[Vec<FeatureSequence>],
    eval: &[FeatureSequence],
    probe: Option<&ProbeCorpus>,
    tc: &TrainConfig,
    sc: &ScalingConfig,
) -> Result<ScalingRow> {
    let frames = |s: &[FeatureSequence]| s.iter().map(|u| u.len()).sum::<usize>();
    let mut prev = frames(reference);
    for s in sizes {
        if frames(s) < prev {
            return Err(Error::Config("data sizes must not shrink".into()));
        }
        prev = frames(s);
    }
    let reps = |ckpt: &Checkpoint, tag: &str| {
        let r = extract_representations(ckpt, eval)?;
        let prov = Provenance {
            model: config.name.clone(),
            checkpoint: format!("{tag}:{}", ckpt.id()),
            manifest_id: String::new(),
            pooling_seed: sc.pooling_seed,
        };
        pool_frames(&r.iter().collect::<Vec<_>>(), sc.max_frames, prov)
    };
    let final_ckpt = |seqs: &[FeatureSequence]| -> Result<Checkpoint> {
        let out = train(config, seqs, tc)?;
        let step = out.log.last().map_or(0, |r| r.step);
        let running = out.log.last().map_or(f64::NAN, |r| r.loss);
        Ok(out.model.checkpoint(step, running, hours(seqs)))
    };
    let base = final_ckpt(reference)?;
    let base_rep = reps(&base, "ref")?;
    let mut row = ScalingRow {
        model: config.name.clone(),
        reference_hours: hours(reference),
        hours: Vec::new(),
        similarity: Vec::new(),
        phone_error: Vec::new(),
        speaker_error: Vec::new(),
    };
    for (k, seqs) in sizes.iter().enumerate() {
        let ckpt = final_ckpt(seqs)?;
        let sim = lincka(&base_rep, &reps(&ckpt, &format!("size{k}"))?)?.value;
        info!("{} at {:.4} h: similarity {sim:.4}", config.name, hours(seqs));
        row.hours.push(hours(seqs));
        row.similarity.push(sim);
        if let Some(p) = probe {
            let [phone, speaker] = p.evaluate(&ckpt, &sc.probe, tc.seed)?;
            row.phone_error.push(phone.error_rate_mean);
            row.speaker_error.push(speaker.error_rate_mean);
        }
    }
    Ok(row)
}

/// Model × size similarity table, one column per size labelled by hours.
pub fn scaling_similarity_csv(rows: &[ScalingRow]) -> String {
    let mut s = String::from("model");
    if let Some(r) = rows.first() {
        for h in &r.hours {
            let _ = write!(s, ",{h:.6}h");
        }
    }
    s.push('\n');
    for r in rows {
        s.push_str(&r.model);
        for v in &r.similarity {
            let _ = write!(s, ",{v:.6}");
        }
        s.push('\n');
    }
    s
}

pub fn scaling_error_csv(rows: &[ScalingRow]) -> String {
    let mut s = String::from("model,hours,phone_err,speaker_err\n");
    for r in rows {
        for (i, h) in r.hours.iter().enumerate() {
            let (p, q) = (r.phone_error.get(i), r.speaker_error.get(i));
            let cell = |v: Option<&f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "{},{h:.6},{},{}", r.model, cell(p), cell(q));
        }
    }
    s
}

pub fn monotonicity_report(rows: &[ScalingRow]) -> String {
    let mut s = String::from("model,similarity_decreases\n");
    for r in rows {
        let _ = writeln!(s, "{},{}", r.model, r.decreasing());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_hand_values() {
        assert_eq!(pearson_r(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(), 1.0);
        assert_eq!(pearson_r(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0]).unwrap(), -1.0);
        assert_eq!(pearson_r(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap(), 0.8);
        assert!(matches!(pearson_r(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::Degenerate(_))));
        assert!(matches!(pearson_r(&[1.0, 2.0], &[1.0, 2.0, 3.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn ln_gamma_matches_factorials() {
        let mut fact = 1.0f64;
        for n in 1..20 {
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-12, "{n}");
            fact *= n as f64;
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }

    #[test]
    fn significance_edges_and_reference() {
        assert_eq!(significance(0.0, 10).unwrap(), 1.0);
        assert_eq!(significance(1.0, 10).unwrap(), 0.0);
        assert_eq!(significance(-1.0, 4).unwrap(), 0.0);
        let p = significance(0.8, 15).unwrap();
        assert!((3.0e-4..=3.8e-4).contains(&p), "{p}");
        assert!(matches!(significance(0.5, 2), Err(Error::InsufficientData(_))));
        // n = 3 has one degree of freedom: p = 1 − 2·atan(|t|)/π.
        let r: f64 = 0.6;
        let t = r / (1.0 - r * r).sqrt();
        let expect = 1.0 - 2.0 * t.atan() / std::f64::consts::PI;
        assert!((significance(r, 3).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn sweep_sorts_and_correlates() {
        let points: Vec<SweepPoint> = (0..5)
            .rev()
            .map(|i| SweepPoint {
                checkpoint: format!("m@{i}"),
                loss: i as f64,
                phone_error: 0.1 + 0.02 * i as f64,
                speaker_error: 0.5 - 0.01 * i as f64,
            })
            .collect();
        let res = SweepResult::from_points("m", points).unwrap();
        assert_eq!(res.points[0].checkpoint, "m@0");
        assert!((res.phone.r - 1.0).abs() < 1e-12);
        assert!((res.speaker.r + 1.0).abs() < 1e-12);
        assert!(res.phone.significant && res.speaker.significant);
        assert!(res.table_csv().starts_with("checkpoint,loss,phone_err,speaker_err\nm@0,"));
    }

    #[test]
    fn nested_subsets_are_nested_per_speaker() {
        let seqs: Vec<FeatureSequence> = (0..12)
            .map(|i| {
                FeatureSequence::new(format!("u{i}"), crate::RealMatrix::zeros(2, 1), format!("s{}", i % 2), None)
                    .unwrap()
            })
            .collect();
        let sets = nested_subsets(&seqs, &[1, 2, 6]).unwrap();
        assert_eq!(sets.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 4, 12]);
        for w in sets.windows(2) {
            assert!(w[0].iter().all(|a| w[1].iter().any(|b| b.utterance_id == a.utterance_id)));
        }
        assert!(matches!(nested_subsets(&seqs, &[2, 2]), Err(Error::Config(_))));
    }

    #[test]
    fn scaling_tables_shape() {
        let rows: Vec<ScalingRow> = (0..4)
            .map(|m| ScalingRow {
                model: format!("m{m}"),
                reference_hours: 1.0,
                hours: vec![2.0, 4.0, 6.0],
                similarity: vec![0.9, 0.8, 0.85],
                phone_error: vec![0.1; 3],
                speaker_error: vec![0.2; 3],
            })
            .collect();
        let csv = scaling_similarity_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines.iter().all(|l| l.split(',').count() == 4));
        assert!(!rows[0].decreasing());
        assert_eq!(scaling_error_csv(&rows).lines().count(), 13);
    }
}
