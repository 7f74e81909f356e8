use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use repsim_core::analysis::{
    affine_fixture, checkpoint_sweep, data_scaling_study, monotonicity_report, nested_subsets, noise_fixture,
    scaling_error_csv, scaling_similarity_csv, ProbeCorpus, ScalingConfig, SweepConfig, SweepResult, SUMMARY_HEADER,
};
use repsim_core::corpus::format::{write_features, write_labels};
use repsim_core::corpus::synth::speaker_splits;
use repsim_core::corpus::{
    generate_synthetic_corpus, log_mel, read_wav, synthesize, CorpusManifest, FeatureSequence, ManifestEntry,
    MelConfig, Split,
};
use repsim_core::pretrain::train::{loss_log_csv, steps_per_epoch};
use repsim_core::pretrain::{
    extract_representations, grad_check_model, sweep_schedule, train, Checkpoint, ModelConfig, TrainConfig,
    TrainOutcome,
};
use repsim_core::probe::{probe_items, run_probe, ProbeReport, ProbeTask};
use repsim_core::similarity::{build_heatmap, pool_frames, Provenance, RepresentationMatrix};
use repsim_core::{Error, RealMatrix, Result};
use sha2::{Digest, Sha256};

use crate::config::{Output, RunConfig};

/// Every utterance of the run's corpus with its split.
pub struct Corpus {
    pub seqs: Vec<FeatureSequence>,
    pub splits: Vec<Split>,
    pub id: String,
}

impl Corpus {
    /// The manifest when one is configured, otherwise the synthetic corpus
    /// with `factor` times the configured utterances per speaker.
    pub fn load(cfg: &RunConfig, factor: usize) -> Result<Self> {
        if let Some(path) = &cfg.corpus.manifest {
            let manifest = CorpusManifest::load(path)?;
            let seqs = manifest.entries.iter().map(|e| manifest.load_entry(e)).collect::<Result<Vec<_>>>()?;
            let splits = manifest.entries.iter().map(|e| e.split).collect();
            return Ok(Self { seqs, splits, id: manifest.id() });
        }
        let spec = cfg.synthetic_spec(factor);
        let digest = Sha256::digest(serde_json::to_string(&spec)?.as_bytes());
        let corpus = synthesize(&spec)?;
        Ok(Self {
            splits: corpus.utterances.iter().map(|u| u.split).collect(),
            seqs: corpus.utterances.into_iter().map(|u| u.sequence).collect(),
            id: format!("synthetic-{}", &hex::encode(digest)[..16]),
        })
    }

    pub fn part(&self, split: Split) -> Vec<FeatureSequence> {
        self.seqs.iter().zip(&self.splits).filter(|(_, s)| **s == split).map(|(q, _)| q.clone()).collect()
    }

    fn probe_corpus(&self, num_phones: usize) -> ProbeCorpus {
        ProbeCorpus { seqs: self.seqs.clone(), splits: self.splits.clone(), num_phones }
    }
}

fn train_config(cfg: &RunConfig, checkpoint_steps: Option<Vec<u64>>) -> TrainConfig {
    TrainConfig {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        lr: cfg.train.lr,
        seed: cfg.seed(),
        checkpoint_every: 0,
        checkpoint_steps,
    }
}

fn train_grid(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<TrainOutcome>> {
    let train_seqs = corpus.part(Split::Train);
    let tc = train_config(cfg, None);
    cfg.models
        .par_iter()
        .map(|name| {
            info!("training {name}");
            train(&ModelConfig::from_name(name, cfg.train.hidden)?, &train_seqs, &tc)
        })
        .collect()
}

fn final_checkpoint(out: &TrainOutcome) -> Result<Checkpoint> {
    out.checkpoints.last().cloned().ok_or_else(|| Error::InsufficientData("training produced no checkpoint".into()))
}

/// Configured checkpoint files, or final checkpoints of freshly trained
/// models when none are given.
fn checkpoints(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<Checkpoint>> {
    if !cfg.checkpoints.is_empty() {
        return cfg.checkpoints.iter().map(Checkpoint::load).collect();
    }
    train_grid(cfg, corpus)?.iter().map(final_checkpoint).collect()
}

/// Display names: the model name, or the checkpoint id when two
/// checkpoints share a model.
fn labels(ckpts: &[Checkpoint]) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for c in ckpts {
        *counts.entry(&c.config.name).or_default() += 1;
    }
    ckpts.iter().map(|c| if counts[c.config.name.as_str()] > 1 { c.id() } else { c.config.name.clone() }).collect()
}

pub fn synth_corpus(cfg: &RunConfig, out: &Output) -> Result<()> {
    let spec = cfg.synthetic_spec(1);
    let (manifest, corpus) = generate_synthetic_corpus(&spec, &out.dir)?;
    let summary = serde_json::json!({
        "manifest_id": manifest.id(),
        "utterances": corpus.utterances.len(),
        "frames": corpus.total_frames(),
        "spec": spec,
    });
    out.json("corpus.json", &summary)?;
    info!("wrote {} utterances to {}", corpus.utterances.len(), out.dir.display());
    Ok(())
}

fn collect_wavs(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_wavs(&path, found)?;
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            found.push(path);
        }
    }
    Ok(())
}

/// Log-Mel features for every WAV under the input directory. The speaker
/// is the file's parent directory name.
pub fn featurize(cfg: &RunConfig, out: &Output) -> Result<()> {
    let input = cfg.input.as_ref().ok_or_else(|| Error::Config("featurize needs --input <wav dir>".into()))?;
    if !input.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", input.display())));
    }
    let mut wavs = Vec::new();
    collect_wavs(input, &mut wavs)?;
    wavs.sort();
    if wavs.is_empty() {
        return Err(Error::InsufficientData(format!("no .wav files under {}", input.display())));
    }
    let speaker_of = |p: &Path| -> String {
        p.parent()
            .filter(|d| *d != input.as_path())
            .and_then(|d| d.file_name())
            .map_or_else(|| "unknown".to_string(), |n| n.to_string_lossy().into_owned())
    };
    let feats = wavs
        .par_iter()
        .map(|p| {
            let wav = read_wav(p)?;
            log_mel(&wav.samples, wav.sample_rate, &MelConfig::default())
        })
        .collect::<Result<Vec<RealMatrix>>>()?;

    let mut by_speaker: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, p) in wavs.iter().enumerate() {
        by_speaker.entry(speaker_of(p)).or_default().push(i);
    }
    let mut split_of = vec![Split::Train; wavs.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed());
    for idx in by_speaker.values() {
        for (&i, s) in idx.iter().zip(speaker_splits(idx.len(), &mut rng)) {
            split_of[i] = s;
        }
    }
    fs::create_dir_all(out.dir.join("features"))?;
    let mut entries = Vec::with_capacity(wavs.len());
    let mut table = String::from("id,speaker,frames,split\n");
    for (i, p) in wavs.iter().enumerate() {
        let speaker = speaker_of(p);
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let id = format!("{speaker}_{stem}");
        let rel = PathBuf::from("features").join(format!("{id}.fmat"));
        write_features(out.dir.join(&rel), &feats[i])?;
        let _ = writeln!(table, "{id},{speaker},{},{}", feats[i].rows(), split_of[i]);
        entries.push(ManifestEntry { id, features: rel, speaker, labels: None, split: split_of[i] });
    }
    CorpusManifest::new(entries, &out.dir)?.save(out.dir.join("manifest.jsonl"))?;
    out.csv("featurize.csv", &table)?;
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, out: &Output) -> Result<()> {
    let corpus = Corpus::load(cfg, 1)?;
    let outcomes = train_grid(cfg, &corpus)?;
    let mut summary = String::from("model,steps,first_epoch_loss,last_epoch_loss,final_checkpoint\n");
    for (name, o) in cfg.models.iter().zip(&outcomes) {
        out.csv(&format!("{name}/loss.csv"), &loss_log_csv(&o.log))?;
        for c in &o.checkpoints {
            c.save(out.dir.join(name).join(format!("step{:06}.ckpt", c.step)))?;
        }
        let last = final_checkpoint(o)?;
        let path = out.dir.join(name).join("final.ckpt");
        last.save(&path)?;
        let means = o.epoch_means();
        let _ = writeln!(
            summary,
            "{name},{},{:.9},{:.9},{name}/final.ckpt",
            last.step,
            means.first().copied().unwrap_or(f64::NAN),
            means.last().copied().unwrap_or(f64::NAN)
        );
    }
    out.csv("pretrain.csv", &summary)?;
    Ok(())
}

pub fn extract(cfg: &RunConfig, out: &Output) -> Result<()> {
    let corpus = Corpus::load(cfg, 1)?;
    let ckpts = checkpoints(cfg, &corpus)?;
    let split = cfg.split()?;
    let seqs = corpus.part(split);
    let mut summary = String::from("model,checkpoint,utterances,dim\n");
    for (label, ckpt) in labels(&ckpts).iter().zip(&ckpts) {
        let reps = extract_representations(ckpt, &seqs)?;
        let dir = out.dir.join(label);
        fs::create_dir_all(dir.join("features"))?;
        let mut entries = Vec::with_capacity(seqs.len());
        for (s, rep) in seqs.iter().zip(&reps) {
            let rel = PathBuf::from("features").join(format!("{}.fmat", s.utterance_id));
            write_features(dir.join(&rel), rep)?;
            let labels = match &s.phone_labels {
                Some(l) => {
                    fs::create_dir_all(dir.join("labels"))?;
                    let rel = PathBuf::from("labels").join(format!("{}.lvec", s.utterance_id));
                    write_labels(dir.join(&rel), l)?;
                    Some(rel)
                }
                None => None,
            };
            entries.push(ManifestEntry {
                id: s.utterance_id.clone(),
                features: rel,
                speaker: s.speaker_id.clone(),
                labels,
                split,
            });
        }
        CorpusManifest::new(entries, &dir)?.save(dir.join("manifest.jsonl"))?;
        let dim = reps.first().map_or(0, |r| r.cols());
        let _ = writeln!(summary, "{label},{},{},{dim}", ckpt.id(), reps.len());
    }
    out.csv("extract.csv", &summary)?;
    Ok(())
}

fn pooled(
    cfg: &RunConfig,
    corpus: &Corpus,
    name: &str,
    checkpoint: &str,
    mats: &[&RealMatrix],
) -> Result<RepresentationMatrix> {
    let prov = Provenance {
        model: name.to_string(),
        checkpoint: checkpoint.to_string(),
        manifest_id: corpus.id.clone(),
        pooling_seed: cfg.seed(),
    };
    pool_frames(mats, cfg.similarity.max_frames, prov)
}

pub fn similarity(cfg: &RunConfig, out: &Output) -> Result<()> {
    let corpus = Corpus::load(cfg, 1)?;
    let ckpts = checkpoints(cfg, &corpus)?;
    let seqs = corpus.part(cfg.split()?);
    let mut reps = Vec::with_capacity(ckpts.len() + 1);
    if cfg.similarity.include_logmel {
        let mats: Vec<&RealMatrix> = seqs.iter().map(|s| &s.frames).collect();
        reps.push(pooled(cfg, &corpus, "logmel", "input", &mats)?);
    }
    let names = labels(&ckpts);
    let extracted = ckpts.par_iter().map(|c| extract_representations(c, &seqs)).collect::<Result<Vec<_>>>()?;
    for ((name, ckpt), r) in names.iter().zip(&ckpts).zip(&extracted) {
        reps.push(pooled(cfg, &corpus, name, &ckpt.id(), &r.iter().collect::<Vec<_>>())?);
    }
    let heatmap = build_heatmap(&reps, cfg.measure()?, cfg.svcca_params())?;
    out.csv("heatmap.csv", &heatmap.to_csv())?;
    let value: serde_json::Value = serde_json::from_str(&heatmap.to_json()?)?;
    out.json("heatmap.json", &value)?;
    Ok(())
}

fn probe_source(
    cfg: &RunConfig,
    corpus: &Corpus,
    name: &str,
    checkpoint: &str,
    reps: Vec<RealMatrix>,
) -> Result<Vec<ProbeReport>> {
    let items = probe_items(&corpus.seqs, &corpus.splits, reps)?;
    let pc = cfg.probe_config();
    [ProbeTask::Phone, ProbeTask::Speaker]
        .into_iter()
        .map(|task| {
            let mut r = run_probe(task, &items, cfg.corpus.phones, &pc, cfg.seed(), cfg.probe.shuffle_labels)?;
            r.model = name.to_string();
            r.checkpoint = checkpoint.to_string();
            info!("{name} {task}: error {:.4} ± {:.4}", r.error_rate_mean, r.error_rate_std);
            Ok(r)
        })
        .collect()
}

pub fn probe(cfg: &RunConfig, out: &Output) -> Result<()> {
    let corpus = Corpus::load(cfg, 1)?;
    let mut reports = Vec::new();
    if cfg.probe.include_logmel {
        let raw: Vec<RealMatrix> = corpus.seqs.iter().map(|s| s.frames.clone()).collect();
        reports.extend(probe_source(cfg, &corpus, "logmel", "input", raw)?);
    }
    let ckpts = checkpoints(cfg, &corpus)?;
    for (name, ckpt) in labels(&ckpts).iter().zip(&ckpts) {
        let reps = extract_representations(ckpt, &corpus.seqs)?;
        reports.extend(probe_source(cfg, &corpus, name, &ckpt.id(), reps)?);
    }
    let mut table = String::from("model,checkpoint,task,error_rate_mean,error_rate_std,runs\n");
    for r in &reports {
        let _ = writeln!(
            table,
            "{},{},{},{:.6},{:.6},{}",
            r.model,
            r.checkpoint,
            r.task,
            r.error_rate_mean,
            r.error_rate_std,
            r.run_errors.len()
        );
    }
    out.csv("probe.csv", &table)?;
    out.json("probe.json", &reports)?;
    Ok(())
}

fn write_sweeps(out: &Output, results: &[SweepResult]) -> Result<()> {
    let mut summary = String::from(SUMMARY_HEADER);
    for r in results {
        out.csv(&format!("sweep_{}.csv", r.model), &r.table_csv())?;
        summary.push_str(&r.summary_rows());
    }
    out.csv("correlation.csv", &summary)?;
    out.json("correlation.json", &results)?;
    Ok(())
}

pub fn sweep_correlate(cfg: &RunConfig, out: &Output) -> Result<()> {
    if let Some(kind) = &cfg.sweep.fixture {
        let points = match kind.as_str() {
            "affine" => affine_fixture(cfg.sweep.fixture_points, cfg.seed()),
            "noise" => noise_fixture(cfg.sweep.fixture_points, cfg.seed()),
            other => return Err(Error::Config(format!("unknown sweep fixture {other:?}; use affine or noise"))),
        };
        return write_sweeps(out, &[SweepResult::from_points(format!("fixture-{kind}"), points)?]);
    }
    let corpus = Corpus::load(cfg, 1)?;
    let train_seqs = corpus.part(Split::Train);
    let eval = corpus.part(Split::Valid);
    let total = (steps_per_epoch(train_seqs.len(), cfg.train.batch_size) * cfg.train.epochs) as u64;
    let schedule = sweep_schedule(total, cfg.sweep.burn_in, cfg.sweep.count);
    if schedule.len() < 3 {
        return Err(Error::Config(format!(
            "only {total} training steps; too few for a {}-point sweep",
            cfg.sweep.count
        )));
    }
    let tc = train_config(cfg, Some(schedule));
    let probe = corpus.probe_corpus(cfg.corpus.phones);
    let sc = SweepConfig { probe: cfg.probe_config(), seed: cfg.seed(), eval_batch: cfg.train.batch_size };
    let results = cfg
        .models
        .iter()
        .map(|name| {
            let trained = train(&ModelConfig::from_name(name, cfg.train.hidden)?, &train_seqs, &tc)?;
            fs::create_dir_all(out.dir.join(name))?;
            for c in &trained.checkpoints {
                c.save(out.dir.join(name).join(format!("step{:06}.ckpt", c.step)))?;
            }
            checkpoint_sweep(&trained.checkpoints, &probe, &eval, &sc)
        })
        .collect::<Result<Vec<_>>>()?;
    write_sweeps(out, &results)
}

pub fn scale_study(cfg: &RunConfig, out: &Output) -> Result<()> {
    let mults = &cfg.scale.multipliers;
    let top = *mults.iter().max().ok_or_else(|| Error::Config("scale.multipliers is empty".into()))?;
    if mults.len() < 2 {
        return Err(Error::Config("scale.multipliers needs a reference size and at least one larger size".into()));
    }
    let corpus = Corpus::load(cfg, top)?;
    let subsets = nested_subsets(&corpus.part(Split::Train), mults)?;
    let eval = corpus.part(Split::Test);
    let probe = corpus.probe_corpus(cfg.corpus.phones);
    let tc = train_config(cfg, None);
    let sc =
        ScalingConfig { max_frames: cfg.similarity.max_frames, pooling_seed: cfg.seed(), probe: cfg.probe_config() };
    let rows = cfg
        .models
        .iter()
        .map(|name| {
            let mc = ModelConfig::from_name(name, cfg.train.hidden)?;
            data_scaling_study(&mc, &subsets[0], &subsets[1..], &eval, Some(&probe), &tc, &sc)
        })
        .collect::<Result<Vec<_>>>()?;
    for r in rows.iter().filter(|r| !r.decreasing()) {
        warn!("{}: similarity to the reference model does not decrease with data size", r.model);
    }
    out.csv("scaling_similarity.csv", &scaling_similarity_csv(&rows))?;
    out.csv("scaling_errors.csv", &scaling_error_csv(&rows))?;
    out.csv("monotonicity.csv", &monotonicity_report(&rows))?;
    out.json("scaling.json", &rows)?;
    Ok(())
}

pub fn grad_check(cfg: &RunConfig, out: &Output) -> Result<()> {
    let g = &cfg.grad_check;
    let reports = cfg
        .models
        .par_iter()
        .map(|name| grad_check_model(name, g.hidden, g.frames, g.batch, cfg.seed(), g.step))
        .collect::<Result<Vec<_>>>()?;
    let mut table = String::from("model,tensors,max_rel_error,worst_tensor,passes\n");
    let mut failed = Vec::new();
    for (name, r) in cfg.models.iter().zip(&reports) {
        let worst = r.worst().map_or("", |e| e.name.as_str());
        let pass = r.passes(g.tolerance);
        if !pass {
            failed.push(name.as_str());
        }
        let _ = writeln!(table, "{name},{},{:.3e},{worst},{pass}", r.entries.len(), r.max_error());
    }
    out.csv("grad_check.csv", &table)?;
    if !failed.is_empty() {
        return Err(Error::Numerical(format!("gradient check above {:e} for {}", g.tolerance, failed.join(", "))));
    }
    Ok(())
}
