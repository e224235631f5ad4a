use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const FORMAT_VERSION: u32 = 1;

/// Which indexes a build produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BuildMode {
    Telii,
    Elii,
    Both,
}

impl BuildMode {
    pub fn has_telii(self) -> bool {
        matches!(self, BuildMode::Telii | BuildMode::Both)
    }

    pub fn has_elii(self) -> bool {
        matches!(self, BuildMode::Elii | BuildMode::Both)
    }
}

impl std::str::FromStr for BuildMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "telii" => Ok(BuildMode::Telii),
            "elii" => Ok(BuildMode::Elii),
            "both" => Ok(BuildMode::Both),
            other => Err(Error::InvalidArgument(format!(
                "unknown build mode {other:?}; expected telii, elii or both"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexParams {
    pub mode: BuildMode,
    /// Largest |day difference| kept in the time-difference index.
    pub max_abs_diff: Option<u32>,
    /// Pairs whose anchor has fewer patients are left out of the temporal
    /// index and answered from Event-Time documents instead.
    pub hybrid_min_patients: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub records: u64,
    pub bytes: u64,
    /// XXH3-64, lower-case hex.
    pub checksum: String,
}

/// Description of a data directory. Contains no timestamps or paths so that
/// identical inputs give byte-identical manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub patients: u64,
    pub events: u64,
    pub records: u64,
    pub skipped_records: u64,
    pub derived_rules: Vec<String>,
    pub index: Option<IndexParams>,
    pub files: BTreeMap<String, FileEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::store(&path, "manifest missing")
            } else {
                Error::store(&path, e.to_string())
            }
        })?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::store(&path, format!("corrupt manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::store(
                &path,
                format!("unsupported format version {}", manifest.format_version),
            ));
        }
        Ok(manifest)
    }

    /// Writes via a temporary file and rename.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    pub fn records_in(&self, file: &str) -> u64 {
        self.files.get(file).map_or(0, |f| f.records)
    }
}
