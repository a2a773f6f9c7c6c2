//! In-memory labeled clips loaded from a manifest.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::archive::read_clip_archive;
use crate::clip::{ClipTensor, LabelSpace, Normalization, SampleId};
use crate::error::{Error, Result};
use crate::ingest::{Manifest, NormStats};
use crate::par::{self, Parallelism};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: SampleId,
    pub label: usize,
    pub source: String,
    pub clip: ClipTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub labels: LabelSpace,
}

/// How clip values are standardized before they reach the model.
/// Dataset-level statistics are fitted on the training set only and travel
/// with the checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Normalizer {
    None,
    ClipLevel,
    DatasetLevel { stats: NormStats },
}

impl Normalizer {
    pub fn fit(mode: Normalization, train: &Dataset) -> Self {
        match mode {
            Normalization::None => Normalizer::None,
            Normalization::ClipLevel => Normalizer::ClipLevel,
            Normalization::DatasetLevel => Normalizer::DatasetLevel {
                stats: NormStats::fit(train.samples.iter().map(|s| &s.clip)),
            },
        }
    }

    pub fn apply(&self, data: &mut Dataset) -> Result<()> {
        for s in &mut data.samples {
            if s.clip.normalization != Normalization::None {
                return Err(Error::Validation(format!(
                    "clip {} is already normalized ({})",
                    s.id, s.clip.normalization
                )));
            }
            match self {
                Normalizer::None => {}
                Normalizer::ClipLevel => {
                    NormStats::fit(std::iter::once(&s.clip)).apply(&mut s.clip);
                    s.clip.normalization = Normalization::ClipLevel;
                }
                Normalizer::DatasetLevel { stats } => {
                    stats.apply(&mut s.clip);
                    s.clip.normalization = Normalization::DatasetLevel;
                }
            }
        }
        Ok(())
    }
}

impl Dataset {
    /// Read every archive in the manifest. The label space comes from the
    /// class names stored in the archives; labels and ids must agree with
    /// the manifest rows.
    pub fn load(manifest: &Manifest, mode: Parallelism) -> Result<Dataset> {
        let records = par::map(mode, &manifest.entries, |_, e| read_clip_archive(&manifest.resolve(e), None))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let mut names: BTreeMap<usize, String> = BTreeMap::new();
        let mut samples = Vec::with_capacity(records.len());
        for (entry, rec) in manifest.entries.iter().zip(records) {
            if rec.id != entry.id || rec.label != entry.label {
                return Err(Error::Validation(format!(
                    "manifest row {} (label {}) disagrees with archive {} (label {})",
                    entry.id, entry.label, rec.id, rec.label
                )));
            }
            match names.get(&rec.label) {
                Some(n) if *n != rec.label_name => {
                    return Err(Error::Validation(format!(
                        "label {} is named both `{n}` and `{}`",
                        rec.label, rec.label_name
                    )))
                }
                _ => {
                    names.insert(rec.label, rec.label_name.clone());
                }
            }
            samples.push(Sample {
                id: rec.id,
                label: rec.label,
                source: entry.source.clone(),
                clip: rec.clip,
            });
        }
        let k = names.keys().next_back().map_or(0, |&m| m + 1);
        let labels = LabelSpace::new((0..k).map(|i| names.get(&i).cloned().unwrap_or_else(|| format!("class{i}"))))?;
        Ok(Dataset { samples, labels })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples with the given ids, in the order given.
    pub fn subset(&self, ids: &[SampleId]) -> Result<Dataset> {
        let index: BTreeMap<SampleId, usize> = self.samples.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
        let samples = ids
            .iter()
            .map(|id| {
                index
                    .get(id)
                    .map(|&i| self.samples[i].clone())
                    .ok_or_else(|| Error::Validation(format!("sample {id} is not in the dataset")))
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            samples,
            labels: self.labels.clone(),
        })
    }

    pub fn sources(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.samples.iter().map(|s| s.source.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.labels.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}
