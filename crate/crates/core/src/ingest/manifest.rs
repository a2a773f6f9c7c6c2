use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clip::SampleId;
use crate::error::{Error, ParseError, Result};

/// One row of a dataset manifest. `path` is relative to the manifest's
/// directory unless absolute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: SampleId,
    pub label: usize,
    pub source: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct Row {
    id: String,
    label: usize,
    source: String,
    path: String,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Manifest {
            entries: Vec::new(),
            root: root.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            w.serialize(Row {
                id: e.id.encode()?,
                label: e.label,
                source: e.source.clone(),
                path: e.path.to_string_lossy().replace('\\', "/"),
            })
            .map_err(|err| Error::Validation(err.to_string()))?;
        }
        if self.entries.is_empty() {
            w.write_record(["id", "label", "source", "path"])
                .map_err(|err| Error::Validation(err.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut entries = Vec::new();
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| ParseError::Malformed {
                row: i + 2,
                reason: e.to_string(),
            })?;
            entries.push(ManifestEntry {
                id: SampleId::decode(&row.id)?,
                label: row.label,
                source: row.source,
                path: PathBuf::from(row.path),
            });
        }
        Ok(Manifest {
            entries,
            root: root.into(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Manifest::from_csv(&text, root)
    }

    pub fn find(&self, id: &SampleId) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| &e.id == id)
    }
}
