//! Dataset manifests: a JSON index of image/mask files.
//!
//! ```json
//! {"version": 1, "working_size": 64,
//!  "entries": [{"id": "a-000", "image": "img/a-000.pgm", "mask": "mask/a-000.pgm",
//!               "split": "train", "domain": "synthetic"}]}
//! ```
//!
//! Paths are relative to the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split {s:?} (expected train, val or test)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    pub split: Split,
    pub domain: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub working_size: usize,
    pub entries: Vec<ManifestEntry>,
    /// Directory the entry paths are relative to. Not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    /// Parses and validates manifest JSON without touching the file system.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut m: Manifest = serde_json::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.root = root.into();
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!("unsupported version {}", self.version)));
        }
        if self.working_size == 0 || self.working_size > 4096 {
            return Err(Error::Manifest(format!("working_size {} outside 1..=4096", self.working_size)));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.id.is_empty() {
                return Err(Error::Manifest("empty id".into()));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate id {:?}", e.id)));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Reads, validates and checks that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = Manifest::parse(&text, root).map_err(|e| match e {
        Error::Manifest(msg) => Error::Manifest(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    for e in &m.entries {
        for p in std::iter::once(&e.image).chain(e.mask.as_ref()) {
            let full = m.resolve(p);
            if !full.is_file() {
                return Err(Error::Manifest(format!("{}: entry {:?} references missing file {}", path.display(), e.id, full.display())));
            }
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"{"version":1,"working_size":64,"entries":[
        {"id":"a","image":"a.pgm","mask":"am.pgm","split":"train","domain":"x"},
        {"id":"b","image":"b.pgm","split":"test","domain":"y"}]}"#;

    #[test]
    fn parses_and_round_trips() {
        let m = Manifest::parse(GOOD, "/data").unwrap();
        assert_eq!(m.entries.len(), 2);
        assert!(m.entries[1].mask.is_none());
        assert_eq!(m.split(Split::Train).count(), 1);
        let again = Manifest::parse(&m.to_json(), "/data").unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn rejects_duplicates_unknown_keys_and_versions() {
        let dup = GOOD.replace("\"id\":\"b\"", "\"id\":\"a\"");
        assert!(matches!(Manifest::parse(&dup, ""), Err(Error::Manifest(m)) if m.contains("duplicate")));
        let extra = GOOD.replace("\"version\":1", "\"version\":1,\"extra\":0");
        assert!(Manifest::parse(&extra, "").is_err());
        let v2 = GOOD.replace("\"version\":1", "\"version\":2");
        assert!(Manifest::parse(&v2, "").is_err());
        let bad_split = GOOD.replace("\"test\"", "\"holdout\"");
        assert!(Manifest::parse(&bad_split, "").is_err());
    }
}
