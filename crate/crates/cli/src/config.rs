//! Run configuration: defaults, a JSON file of flat dotted keys, then
//! command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use repsim_core::corpus::{Split, SyntheticSpec};
use repsim_core::pretrain::MODEL_NAMES;
use repsim_core::probe::ProbeConfig;
use repsim_core::similarity::{Measure, SvccaParams, DEFAULT_MAX_FRAMES, DEFAULT_RIDGE, DEFAULT_VARIANCE_KEEP};
use repsim_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    /// JSON file of dotted keys, e.g. {"train.epochs": 5}
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated model names
    #[arg(long, value_delimiter = ',')]
    pub models: Option<Vec<String>>,
    /// lincka or svcca
    #[arg(long)]
    pub measure: Option<String>,
    #[arg(long)]
    pub max_frames: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Worker threads; 0 uses every core
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Corpus manifest instead of a synthetic corpus
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Checkpoint file; repeat for several
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    /// Input directory for featurize
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Corpus split: train, valid or test
    #[arg(long)]
    pub split: Option<String>,
    /// Synthetic sweep fixture: affine or noise
    #[arg(long)]
    pub fixture: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub manifest: Option<PathBuf>,
    pub speakers: usize,
    pub phones: usize,
    pub utterances_per_speaker: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub noise_sigma: f64,
    /// Corpus seed; the run seed when absent.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilaritySection {
    pub measure: String,
    pub max_frames: usize,
    pub variance_keep: f64,
    pub ridge: f64,
    pub include_logmel: bool,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub runs: usize,
    pub normalize: bool,
    pub valid_fraction: f64,
    pub shuffle_labels: bool,
    pub include_logmel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub count: usize,
    pub burn_in: f64,
    pub fixture: Option<String>,
    pub fixture_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleSection {
    pub multipliers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckSection {
    pub hidden: usize,
    pub frames: usize,
    pub batch: usize,
    pub step: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub jobs: usize,
    pub models: Vec<String>,
    pub checkpoints: Vec<PathBuf>,
    pub input: Option<PathBuf>,
    pub corpus: CorpusSection,
    pub train: TrainSection,
    pub similarity: SimilaritySection,
    pub probe: ProbeSection,
    pub sweep: SweepSection,
    pub scale: ScaleSection,
    pub grad_check: GradCheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let probe = ProbeConfig::default();
        Self {
            seed: None,
            out: PathBuf::from("out"),
            jobs: 0,
            models: MODEL_NAMES.iter().map(|s| s.to_string()).collect(),
            checkpoints: Vec::new(),
            input: None,
            corpus: CorpusSection {
                manifest: None,
                speakers: 20,
                phones: 42,
                utterances_per_speaker: 30,
                min_frames: 16,
                max_frames: 32,
                noise_sigma: 0.1,
                seed: None,
            },
            train: TrainSection { hidden: 64, epochs: 10, batch_size: 32, lr: 1e-3 },
            similarity: SimilaritySection {
                measure: "lincka".into(),
                max_frames: DEFAULT_MAX_FRAMES,
                variance_keep: DEFAULT_VARIANCE_KEEP,
                ridge: DEFAULT_RIDGE,
                include_logmel: false,
                split: "test".into(),
            },
            probe: ProbeSection {
                epochs: probe.epochs,
                batch_size: probe.batch_size,
                lr: probe.lr,
                runs: probe.runs,
                normalize: probe.normalize,
                valid_fraction: probe.valid_fraction,
                shuffle_labels: false,
                include_logmel: false,
            },
            sweep: SweepSection { count: 15, burn_in: 0.1, fixture: None, fixture_points: 20 },
            scale: ScaleSection { multipliers: vec![1, 2, 4, 6] },
            grad_check: GradCheckSection { hidden: 16, frames: 12, batch: 2, step: 1e-5, tolerance: 1e-4 },
        }
    }
}

/// Writes `value` at the dotted `key` inside `tree`, refusing keys that do
/// not name an existing field.
fn set_dotted(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj =
            node.as_object_mut().ok_or_else(|| Error::Config(format!("key {key:?} descends into a non-object")))?;
        let slot = obj.get_mut(*part).ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Ok(())
}

impl RunConfig {
    /// Defaults, then the config file, then flags.
    pub fn resolve(ov: &Overrides) -> Result<Self> {
        let mut tree = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = &ov.config {
            let text =
                fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            let map: Map<String, Value> =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            for (k, v) in map {
                set_dotted(&mut tree, &k, v)?;
            }
        }
        let mut cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(s) = ov.seed {
            cfg.seed = Some(s);
        }
        if let Some(o) = &ov.out {
            cfg.out = o.clone();
        }
        if let Some(m) = &ov.models {
            cfg.models = m.clone();
        }
        if let Some(m) = &ov.measure {
            cfg.similarity.measure = m.clone();
        }
        if let Some(n) = ov.max_frames {
            cfg.similarity.max_frames = n;
        }
        if let Some(h) = ov.hidden {
            cfg.train.hidden = h;
        }
        if let Some(e) = ov.epochs {
            cfg.train.epochs = e;
        }
        if let Some(j) = ov.jobs {
            cfg.jobs = j;
        }
        if let Some(m) = &ov.manifest {
            cfg.corpus.manifest = Some(m.clone());
        }
        if !ov.checkpoints.is_empty() {
            cfg.checkpoints = ov.checkpoints.clone();
        }
        if let Some(i) = &ov.input {
            cfg.input = Some(i.clone());
        }
        if let Some(s) = &ov.split {
            cfg.similarity.split = s.clone();
        }
        if let Some(f) = &ov.fixture {
            cfg.sweep.fixture = Some(f.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed.is_none() {
            return Err(Error::Config("a seed is required (--seed or \"seed\" in the config)".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Config("no models selected".into()));
        }
        if let Some(bad) = self.models.iter().find(|m| !MODEL_NAMES.contains(&m.as_str())) {
            return Err(Error::Config(format!("unknown model {bad:?}; expected one of {}", MODEL_NAMES.join(", "))));
        }
        self.measure()?;
        self.split()?;
        if let Some(p) = &self.corpus.manifest {
            if !p.is_file() {
                return Err(Error::Config(format!("manifest {} does not exist", p.display())));
            }
        }
        if let Some(p) = self.checkpoints.iter().find(|p| !p.is_file()) {
            return Err(Error::Config(format!("checkpoint {} does not exist", p.display())));
        }
        if self.probe.runs == 0 {
            return Err(Error::Config("probe.runs must be positive".into()));
        }
        if self.sweep.count < 3 {
            return Err(Error::Config("sweep.count must be at least 3".into()));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or_default()
    }

    pub fn measure(&self) -> Result<Measure> {
        self.similarity
            .measure
            .parse()
            .map_err(|_| Error::Config(format!("unknown measure {:?}", self.similarity.measure)))
    }

    pub fn split(&self) -> Result<Split> {
        match self.similarity.split.as_str() {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }

    pub fn svcca_params(&self) -> SvccaParams {
        SvccaParams { variance_keep: self.similarity.variance_keep, ridge: self.similarity.ridge }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            epochs: self.probe.epochs,
            batch_size: self.probe.batch_size,
            lr: self.probe.lr,
            runs: self.probe.runs,
            normalize: self.probe.normalize,
            valid_fraction: self.probe.valid_fraction,
        }
    }

    pub fn synthetic_spec(&self, utterance_factor: usize) -> SyntheticSpec {
        let c = &self.corpus;
        let mut spec = SyntheticSpec::new(
            c.speakers,
            c.phones,
            c.utterances_per_speaker * utterance_factor,
            c.seed.unwrap_or(self.seed()),
        );
        spec.min_frames = c.min_frames;
        spec.max_frames = c.max_frames;
        spec.noise_sigma = c.noise_sigma;
        spec
    }

    /// SHA-256 of the resolved configuration, excluding the output
    /// directory and thread count.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).unwrap_or(Value::Null);
        if let Some(o) = v.as_object_mut() {
            o.remove("out");
            o.remove("jobs");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

/// Provenance stamped on every output file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            tool: "repsim",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config_sha256: cfg.hash(),
            seed: cfg.seed(),
        }
    }

    pub fn csv_header(&self) -> String {
        format!(
            "# {} {} command={} config_sha256={} seed={}\n",
            self.tool, self.version, self.command, self.config_sha256, self.seed
        )
    }
}

/// Output directory plus the provenance written into each file.
pub struct Output {
    pub dir: PathBuf,
    pub provenance: Provenance,
}

impl Output {
    pub fn new(dir: &Path, provenance: Provenance) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), provenance })
    }

    pub fn csv(&self, name: &str, body: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, format!("{}{body}", self.provenance.csv_header()))?;
        Ok(path)
    }

    pub fn json<T: Serialize>(&self, name: &str, payload: &T) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let doc = serde_json::json!({ "provenance": self.provenance, "data": payload });
        fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seed": 4, "train.epochs": 3, "models": ["mpc-trf"], "corpus.noise_sigma": 0.0}"#)
            .unwrap();
        let cfg = RunConfig::resolve(&Overrides { config: Some(path.clone()), epochs: Some(5), ..Default::default() })
            .unwrap();
        assert_eq!(cfg.seed, Some(4));
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.models, vec!["mpc-trf"]);
        assert_eq!(cfg.corpus.noise_sigma, 0.0);

        fs::write(&path, r#"{"seed": 4, "train.epoch": 3}"#).unwrap();
        let err = RunConfig::resolve(&Overrides { config: Some(path.clone()), ..Default::default() }).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        fs::write(&path, r#"{"seed": "four"}"#).unwrap();
        assert!(matches!(
            RunConfig::resolve(&Overrides { config: Some(path), ..Default::default() }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn seed_and_names_are_validated() {
        assert!(matches!(RunConfig::resolve(&Overrides::default()), Err(Error::Config(_))));
        let ov = Overrides { seed: Some(1), models: Some(vec!["apc-bw-rnn".into()]), ..Default::default() };
        assert!(matches!(RunConfig::resolve(&ov), Err(Error::Config(_))));
        let ov = Overrides { seed: Some(1), measure: Some("cka".into()), ..Default::default() };
        assert!(matches!(RunConfig::resolve(&ov), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_output_location_and_threads() {
        let a = RunConfig::resolve(&Overrides {
            seed: Some(2),
            out: Some("a".into()),
            jobs: Some(1),
            ..Default::default()
        })
        .unwrap();
        let b = RunConfig::resolve(&Overrides {
            seed: Some(2),
            out: Some("b".into()),
            jobs: Some(4),
            ..Default::default()
        })
        .unwrap();
        let c = RunConfig::resolve(&Overrides { seed: Some(3), ..Default::default() }).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
