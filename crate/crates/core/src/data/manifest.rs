use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::TightBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One manifest line. Paths are relative to the manifest's directory unless
/// absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[usize; 4]>,
    pub split: Split,
    /// Pixel spacing (row, col) in mm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<[f64; 2]>,
}

impl ManifestEntry {
    pub fn tight_box(&self) -> Option<TightBox> {
        self.bbox.map(TightBox::from)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            entries,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::InvalidManifest(format!("duplicate id {:?}", e.id)));
            }
            if e.split == Split::Train && e.bbox.is_none() && e.mask_path.is_none() {
                return Err(Error::InvalidManifest(format!(
                    "train entry {:?} has neither box nor mask",
                    e.id
                )));
            }
            if let Some([r0, c0, r1, c1]) = e.bbox {
                if r0 > r1 || c0 > c1 {
                    return Err(Error::InvalidManifest(format!("entry {:?} has an inverted box", e.id)));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::InvalidManifest(format!("{}:{}: {e}", path.display(), n + 1)))?;
            entries.push(entry);
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(entries, base)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let write = || -> std::io::Result<()> {
            let mut out = BufWriter::new(File::create(path)?);
            for e in &self.entries {
                serde_json::to_writer(&mut out, e)?;
                out.write_all(b"\n")?;
            }
            out.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn with_entries(&self, entries: Vec<ManifestEntry>) -> Self {
        Self {
            entries,
            base_dir: self.base_dir.clone(),
        }
    }
}
