//! Zip containers of raw little-endian float tensors plus a JSON text
//! metadata entry. Clip archives, embedding banks and checkpoints all share
//! this layout. Entries are stored uncompressed with a fixed timestamp so
//! identical inputs produce identical bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipArchive, ZipWriter};

use crate::clip::{ClipTensor, LabelSpace, Normalization, SampleId, SourceMeta};
use crate::error::{Error, FormatError, Result};

pub const CLIP_FORMAT_VERSION: u32 = 1;

/// In-memory view of a zip container: entry name → bytes.
#[derive(Debug, Default, Clone)]
pub struct Bundle {
    path: PathBuf,
    entries: BTreeMap<String, Vec<u8>>,
}

impl Bundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.entries.insert(name.into(), bytes);
    }

    pub fn insert_f32(&mut self, name: impl Into<String>, values: &[f32]) {
        self.insert(name, f32_to_le(values));
    }

    pub fn insert_f64(&mut self, name: impl Into<String>, values: &[f64]) {
        self.insert(name, values.iter().flat_map(|v| v.to_le_bytes()).collect());
    }

    pub fn insert_json<T: Serialize>(&mut self, name: impl Into<String>, value: &T) {
        let text = serde_json::to_string_pretty(value).expect("metadata serializes");
        self.insert(name, text.into_bytes());
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, name: &str) -> Result<&[u8]> {
        self.entries
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| {
                FormatError::MissingEntry {
                    path: self.path.clone(),
                    entry: name.to_string(),
                }
                .into()
            })
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        std::str::from_utf8(self.get(name)?).map_err(|e| self.bad_meta(format!("{name}: {e}")))
    }

    pub fn json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T> {
        serde_json::from_str(self.text(name)?).map_err(|e| self.bad_meta(format!("{name}: {e}")))
    }

    /// Decode `expected` little-endian f32 values from an entry.
    pub fn f32s(&self, name: &str, expected: usize) -> Result<Vec<f32>> {
        let bytes = self.sized(name, expected, 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f64s(&self, name: &str, expected: usize) -> Result<Vec<f64>> {
        let bytes = self.sized(name, expected, 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn sized(&self, name: &str, expected: usize, width: usize) -> Result<&[u8]> {
        let bytes = self.get(name)?;
        if bytes.len() % width != 0 {
            return Err(FormatError::Truncated {
                path: self.path.clone(),
                entry: name.into(),
                len: bytes.len(),
                width,
            }
            .into());
        }
        if bytes.len() != expected * width {
            return Err(FormatError::ShapeMismatch {
                path: self.path.clone(),
                entry: name.into(),
                expected: expected * width,
                actual: bytes.len(),
            }
            .into());
        }
        Ok(bytes)
    }

    pub fn bad_meta(&self, reason: impl Into<String>) -> Error {
        FormatError::BadMeta {
            path: self.path.clone(),
            reason: reason.into(),
        }
        .into()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut zip = ZipWriter::new(BufWriter::new(file));
        let options = SimpleFileOptions::default()
            .compression_method(CompressionMethod::Stored)
            .last_modified_time(DateTime::default())
            .unix_permissions(0o644);
        let container = |e: zip::result::ZipError| -> Error {
            FormatError::Container {
                path: path.to_path_buf(),
                reason: e.to_string(),
            }
            .into()
        };
        for (name, bytes) in &self.entries {
            zip.start_file(name.as_str(), options).map_err(container)?;
            zip.write_all(bytes).map_err(|e| Error::io(path, e))?;
        }
        let mut inner = zip.finish().map_err(container)?;
        inner.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let container = |e: zip::result::ZipError| -> Error {
            FormatError::Container {
                path: path.to_path_buf(),
                reason: e.to_string(),
            }
            .into()
        };
        let mut zip = ZipArchive::new(file).map_err(container)?;
        let mut entries = BTreeMap::new();
        for i in 0..zip.len() {
            let mut entry = zip.by_index(i).map_err(container)?;
            let mut bytes = Vec::with_capacity(entry.size() as usize);
            entry
                .read_to_end(&mut bytes)
                .map_err(|e| Error::io(path, e))?;
            entries.insert(entry.name().to_string(), bytes);
        }
        Ok(Bundle {
            path: path.to_path_buf(),
            entries,
        })
    }
}

pub fn f32_to_le(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClipMeta {
    version: u32,
    id: String,
    label: usize,
    label_name: String,
    source: SourceMeta,
    shape: [usize; 3],
    pad_mask: Vec<bool>,
    point_counts: Vec<usize>,
    normalization: Normalization,
}

/// Everything stored in one clip archive.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub clip: ClipTensor,
    pub id: SampleId,
    pub label: usize,
    pub label_name: String,
    pub source: SourceMeta,
}

pub fn write_clip_archive(
    path: &Path,
    clip: &ClipTensor,
    id: SampleId,
    label: usize,
    label_name: &str,
    source: &SourceMeta,
) -> Result<()> {
    clip.check_standard()?;
    let meta = ClipMeta {
        version: CLIP_FORMAT_VERSION,
        id: id.encode()?,
        label,
        label_name: label_name.to_string(),
        source: source.clone(),
        shape: [clip.frames, clip.points, clip.channels],
        pad_mask: clip.pad_mask.clone(),
        point_counts: clip.point_counts.clone(),
        normalization: clip.normalization,
    };
    let mut bundle = Bundle::new();
    bundle.insert_f32("data", &clip.data);
    bundle.insert_json("meta", &meta);
    bundle.write(path)
}

/// Read a clip archive. When `labels` is given, the stored label index is
/// checked against it.
pub fn read_clip_archive(path: &Path, labels: Option<&LabelSpace>) -> Result<ClipRecord> {
    let bundle = Bundle::read(path)?;
    let meta: ClipMeta = bundle.json("meta")?;
    if meta.version != CLIP_FORMAT_VERSION {
        return Err(FormatError::Version {
            path: path.to_path_buf(),
            found: meta.version,
            expected: CLIP_FORMAT_VERSION,
        }
        .into());
    }
    let [t, p, c] = meta.shape;
    if meta.pad_mask.len() != t || meta.point_counts.len() != t {
        return Err(bundle.bad_meta(format!(
            "pad_mask/point_counts lengths {}/{} do not match {t} frames",
            meta.pad_mask.len(),
            meta.point_counts.len()
        )));
    }
    let data = bundle.f32s("data", t * p * c)?;
    if let Some(labels) = labels {
        if meta.label >= labels.len() {
            return Err(FormatError::LabelRange {
                path: path.to_path_buf(),
                label: meta.label,
                classes: labels.len(),
            }
            .into());
        }
    }
    let id = SampleId::decode(&meta.id).map_err(|e| bundle.bad_meta(e.to_string()))?;
    let clip = ClipTensor {
        frames: t,
        points: p,
        channels: c,
        data,
        pad_mask: meta.pad_mask,
        point_counts: meta.point_counts,
        normalization: meta.normalization,
    };
    clip.check_standard()
        .map_err(|e| bundle.bad_meta(e.to_string()))?;
    Ok(ClipRecord {
        clip,
        id,
        label: meta.label,
        label_name: meta.label_name,
        source: meta.source,
    })
}
