//! JSON-lines corpus manifests.
//!
//! One object per line: `{"id", "features", "speaker", "labels", "split"}`.
//! Paths are stored as written and resolved relative to the manifest's
//! directory when relative.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::format::{read_features, read_labels};
use crate::corpus::FeatureSequence;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub features: PathBuf,
    pub speaker: String,
    pub labels: Option<PathBuf>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl CorpusManifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self { entries, base_dir: base_dir.into() };
        m.check_unique_ids()?;
        Ok(m)
    }

    fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate utterance id {:?}", e.id)));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
        Self::new(entries, base_dir)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    /// Stable 64-bit FNV-1a digest of the serialized manifest, in hex.
    pub fn id(&self) -> String {
        let text = self.to_jsonl().unwrap_or_default();
        format!("{:016x}", fnv1a(text.as_bytes()))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Manifest restricted to the given splits, same base directory.
    pub fn subset(&self, splits: &[Split]) -> Self {
        let entries = self.entries.iter().filter(|e| splits.contains(&e.split)).cloned().collect();
        Self { entries, base_dir: self.base_dir.clone() }
    }

    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.entries.iter().map(|e| e.speaker.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    /// Every speaker must occur in the train split (speaker probing contract).
    pub fn check_speakers_in_train(&self) -> Result<()> {
        let train: HashSet<&str> = self.split(Split::Train).map(|e| e.speaker.as_str()).collect();
        for e in &self.entries {
            if !train.contains(e.speaker.as_str()) {
                return Err(Error::Contract(format!("speaker {:?} has no train utterances", e.speaker)));
            }
        }
        Ok(())
    }

    pub fn load_entry(&self, e: &ManifestEntry) -> Result<FeatureSequence> {
        let frames = read_features(self.resolve(&e.features))?;
        let labels = match &e.labels {
            Some(p) => Some(read_labels(self.resolve(p))?),
            None => None,
        };
        FeatureSequence::new(e.id.clone(), frames, e.speaker.clone(), labels)
    }

    /// Loads every entry of the requested split (all entries when `None`),
    /// in manifest order.
    pub fn load_sequences(&self, split: Option<Split>) -> Result<Vec<FeatureSequence>> {
        self.entries.iter().filter(|e| split.is_none_or(|s| e.split == s)).map(|e| self.load_entry(e)).collect()
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, spk: &str, split: Split) -> ManifestEntry {
        ManifestEntry {
            id: id.into(),
            features: format!("features/{id}.fmat").into(),
            speaker: spk.into(),
            labels: None,
            split,
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let mut e = entry("a", "s1", Split::Train);
        e.labels = Some("labels/a.lvec".into());
        let m = CorpusManifest::new(vec![e, entry("b", "s2", Split::Test)], "/tmp").unwrap();
        let text = m.to_jsonl().unwrap();
        assert!(text.lines().next().unwrap().contains("\"split\":\"train\""));
        assert!(text.lines().nth(1).unwrap().contains("\"labels\":null"));
        assert_eq!(CorpusManifest::parse(&text, "/tmp").unwrap(), m);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = CorpusManifest::new(vec![entry("a", "s", Split::Train), entry("a", "s", Split::Test)], ".");
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn speaker_contract() {
        let m = CorpusManifest::new(vec![entry("a", "s1", Split::Train), entry("b", "s2", Split::Test)], ".").unwrap();
        assert!(matches!(m.check_speakers_in_train(), Err(Error::Contract(_))));
    }

    #[test]
    fn relative_paths_resolve_against_base() {
        let m = CorpusManifest::new(vec![], "/data/corpus").unwrap();
        assert_eq!(m.resolve(Path::new("f/x.fmat")), PathBuf::from("/data/corpus/f/x.fmat"));
        assert_eq!(m.resolve(Path::new("/abs/x.fmat")), PathBuf::from("/abs/x.fmat"));
    }
}
