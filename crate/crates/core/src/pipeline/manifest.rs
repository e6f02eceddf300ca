//! JSON-lines dataset manifests: one entry per clip.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// One clip with its captions and, once `prepare` has run, the cached tagger
/// distribution the guiding text is sampled from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub clip: String,
    pub captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    /// Normalized tag distribution cached by `prepare`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guide_probs: Option<Vec<f64>>,
    /// Fixed label selection, when sampling is not wanted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guide_labels: Option<Vec<usize>>,
}

/// A manifest plus the directory it was loaded from (clip paths resolve
/// relative to it).
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: PathBuf) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("manifest has no entries".into()));
        }
        for e in &entries {
            if e.captions.is_empty() {
                return Err(Error::InvalidInput(format!("{}: entry has no captions", e.clip)));
            }
        }
        Ok(Self { entries, base_dir })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| {
                Error::InvalidInput(format!("{} line {}: {e}", path.display(), lineno + 1))
            })?;
            entries.push(entry);
        }
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::new(entries, base)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn clip_path(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.clip);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Fail fast if any referenced clip is missing, naming the offender.
    pub fn check_clips(&self) -> Result<()> {
        for e in &self.entries {
            let p = self.clip_path(e);
            if !p.is_file() {
                return Err(Error::InvalidInput(format!("clip not found: {}", p.display())));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn all_captions(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().flat_map(|e| e.captions.iter().map(String::as_str))
    }
}
