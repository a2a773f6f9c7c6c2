//! Unified 33-class action taxonomy and the registry of the three radar
//! sources, with their global subject/scene numbering.

use std::sync::OnceLock;

use crate::clip::{LabelSpace, SampleId, SourceMeta};
use crate::error::{Error, Result};

const TAXONOMY_CSV: &str = include_str!("../data/taxonomy.csv");

/// One unified action class and the original labels it absorbs.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionClass {
    pub id: usize,
    pub name: String,
    pub kind: String,
    /// `(source key, original label, sequence count)`
    pub origins: Vec<(String, String, usize)>,
}

pub fn taxonomy() -> &'static [ActionClass] {
    static TABLE: OnceLock<Vec<ActionClass>> = OnceLock::new();
    TABLE.get_or_init(|| parse_taxonomy(TAXONOMY_CSV).expect("bundled taxonomy parses"))
}

fn parse_taxonomy(text: &str) -> Result<Vec<ActionClass>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| Error::Validation(e.to_string()))?
        .clone();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Validation(e.to_string()))?;
        let mut origins = Vec::new();
        for (h, v) in headers.iter().zip(rec.iter()).skip(3) {
            if v.is_empty() {
                continue;
            }
            let (label, count) = v
                .rsplit_once(':')
                .ok_or_else(|| Error::Validation(format!("bad origin `{v}`")))?;
            let count = count
                .parse()
                .map_err(|_| Error::Validation(format!("bad count in `{v}`")))?;
            origins.push((h.to_string(), label.to_string(), count));
        }
        out.push(ActionClass {
            id: rec[0]
                .parse()
                .map_err(|_| Error::Validation(format!("bad id `{}`", &rec[0])))?,
            name: rec[1].to_string(),
            kind: rec[2].to_string(),
            origins,
        });
    }
    Ok(out)
}

/// Label space over the unified taxonomy, in id order.
pub fn unified_labels() -> LabelSpace {
    LabelSpace::new(taxonomy().iter().map(|c| c.name.clone())).expect("taxonomy names unique")
}

/// Map a source's original action label to the unified class id.
pub fn unify(source_key: &str, original: &str) -> Option<usize> {
    taxonomy().iter().find_map(|c| {
        c.origins
            .iter()
            .any(|(s, l, _)| s == source_key && l.eq_ignore_ascii_case(original))
            .then_some(c.id)
    })
}

/// Static description of a supported source and how its subjects and scenes
/// map onto the global `P`/`E` fields of a [`SampleId`].
#[derive(Debug, Clone, PartialEq)]
pub struct SourceInfo {
    pub key: &'static str,
    pub dataset_idx: u32,
    pub carrier_frequency: f64,
    pub frame_rate: f64,
    pub subjects: u32,
    pub scenes: u32,
    pub subject_offset: u32,
    pub scene_offset: u32,
    pub policy: PolicyKind,
}

/// Per-source preprocessing policy, fixed from the dataset descriptions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Sliding { window: usize, stride: usize },
    SegmentThenSliding { window: usize, stride: usize },
    Segmentation,
}

pub const SOURCES: [SourceInfo; 3] = [
    SourceInfo {
        key: "radhar",
        dataset_idx: 1,
        carrier_frequency: 77e9,
        frame_rate: 30.0,
        subjects: 2,
        scenes: 1,
        subject_offset: 0,
        scene_offset: 0,
        policy: PolicyKind::Sliding {
            window: 60,
            stride: 10,
        },
    },
    SourceInfo {
        key: "mri",
        dataset_idx: 2,
        carrier_frequency: 77e9,
        frame_rate: 10.0,
        subjects: 20,
        scenes: 1,
        subject_offset: 2,
        scene_offset: 1,
        policy: PolicyKind::SegmentThenSliding {
            window: 32,
            stride: 16,
        },
    },
    SourceInfo {
        key: "mmfi",
        dataset_idx: 3,
        carrier_frequency: 62e9,
        frame_rate: 30.0,
        subjects: 40,
        scenes: 4,
        subject_offset: 22,
        scene_offset: 2,
        policy: PolicyKind::Segmentation,
    },
];

pub fn source_by_key(key: &str) -> Result<&'static SourceInfo> {
    SOURCES
        .iter()
        .find(|s| s.key.eq_ignore_ascii_case(key))
        .ok_or_else(|| {
            let names: Vec<_> = SOURCES.iter().map(|s| s.key).collect();
            Error::Config(format!(
                "unknown source `{key}`; supported sources: {}",
                names.join(", ")
            ))
        })
}

pub fn source_by_dataset(dataset_idx: u32) -> Option<&'static SourceInfo> {
    SOURCES.iter().find(|s| s.dataset_idx == dataset_idx)
}

impl SourceInfo {
    pub fn meta(&self) -> SourceMeta {
        SourceMeta {
            name: self.key.to_string(),
            carrier_frequency: self.carrier_frequency,
            frame_rate: self.frame_rate,
            notes: String::new(),
        }
    }

    /// Zero-based subject number within this source.
    pub fn local_subject(&self, id: &SampleId) -> Option<u32> {
        let local = id.subject.checked_sub(self.subject_offset + 1)?;
        (local < self.subjects).then_some(local)
    }

    /// Zero-based scene number within this source.
    pub fn local_scene(&self, id: &SampleId) -> Option<u32> {
        let local = id.env.checked_sub(self.scene_offset + 1)?;
        (local < self.scenes).then_some(local)
    }

    pub fn global_subject(&self, local: u32) -> u32 {
        self.subject_offset + local + 1
    }

    pub fn global_scene(&self, local: u32) -> u32 {
        self.scene_offset + local + 1
    }
}
