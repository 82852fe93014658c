use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::container::write_atomic;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub id: String,
    pub features: String,
    pub video: String,
    pub labels: Vec<usize>,
    pub split: Split,
    pub seed: u64,
}

/// JSON-lines clip index.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ClipRecord>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ClipRecord>) -> Result<Self> {
        let m = Self {
            root: root.into(),
            records,
        };
        m.validate()?;
        Ok(m)
    }

    /// Unique ids and at least one label per clip. Split disjointness
    /// follows from id uniqueness since each record names one split.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::validation(format!("duplicate clip id {}", r.id)));
            }
            if r.labels.is_empty() {
                return Err(Error::validation(format!("clip {} has no labels", r.id)));
            }
        }
        Ok(())
    }

    /// Every referenced file exists.
    pub fn check_paths(&self) -> Result<()> {
        for r in &self.records {
            for p in [&r.features, &r.video] {
                let full = self.root.join(p);
                if !full.is_file() {
                    return Err(Error::validation(format!(
                        "clip {}: {} does not exist",
                        r.id,
                        full.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClipRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut records = Vec::new();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim();
            if !trimmed.is_empty() {
                let r: ClipRecord = serde_json::from_str(trimmed)
                    .map_err(|e| Error::format(offset, format!("manifest record: {e}")))?;
                records.push(r);
            }
            offset += line.len() as u64;
        }
        Self::new(root, records)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    /// SHA-256 of the canonical JSON-lines text, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_jsonl()?.as_bytes())))
    }

    /// Hash restricted to one split.
    pub fn split_hash(&self, split: Split) -> Result<String> {
        let mut h = Sha256::new();
        for r in self.split(split) {
            h.update(serde_json::to_string(r)?.as_bytes());
            h.update(b"\n");
        }
        Ok(hex::encode(h.finalize()))
    }
}
