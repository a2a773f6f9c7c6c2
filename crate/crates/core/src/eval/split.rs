//! Train/test protocol splits over a manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::clip::SampleId;
use crate::error::{Error, ParseError, Result};
use crate::ingest::{Manifest, ManifestEntry};
use crate::seed;
use crate::taxonomy::{source_by_dataset, SourceInfo};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Per-source 60:40 shuffle.
    Random,
    /// Cross-subject over the second and third sources.
    #[default]
    CSub,
    /// Cross-scene: third-source scenes 0-1 are held out.
    CSet,
    /// Train on the first two sources, test on the third, shared classes only.
    StrictCrossSource,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [
        Protocol::Random,
        Protocol::CSub,
        Protocol::CSet,
        Protocol::StrictCrossSource,
    ];
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Random => "random",
            Protocol::CSub => "c_sub",
            Protocol::CSet => "c_set",
            Protocol::StrictCrossSource => "strict_cross_source",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| Error::Config(format!(
                "unknown protocol `{s}` (expected random, c_sub, c_set, strict_cross_source)"
            )))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifest {
    pub protocol: Protocol,
    pub train: Vec<SampleId>,
    pub test: Vec<SampleId>,
}

/// Dataset indices of the sources in their fixed roles.
const FIRST: u32 = 1;
const SECOND: u32 = 2;
const THIRD: u32 = 3;
/// Subjects below these local numbers train under cross-subject.
const CSUB_TRAIN_SUBJECTS: [(u32, u32); 2] = [(SECOND, 10), (THIRD, 20)];
/// Third-source scenes held out under cross-set.
const CSET_TEST_SCENES: [u32; 2] = [0, 1];

fn source_of(e: &ManifestEntry) -> Result<&'static SourceInfo> {
    source_by_dataset(e.id.dataset).ok_or_else(|| {
        Error::Validation(format!(
            "sample {} names dataset {} which has no source metadata",
            e.id, e.id.dataset
        ))
    })
}

fn local_subject(e: &ManifestEntry) -> Result<u32> {
    let src = source_of(e)?;
    src.local_subject(&e.id).ok_or_else(|| {
        Error::Validation(format!("sample {} has subject {} outside source `{}`", e.id, e.id.subject, src.key))
    })
}

fn local_scene(e: &ManifestEntry) -> Result<u32> {
    let src = source_of(e)?;
    src.local_scene(&e.id).ok_or_else(|| {
        Error::Validation(format!("sample {} has scene {} outside source `{}`", e.id, e.id.env, src.key))
    })
}

fn labels_of(entries: &[&ManifestEntry], dataset: impl Fn(u32) -> bool) -> BTreeSet<usize> {
    entries.iter().filter(|e| dataset(e.id.dataset)).map(|e| e.label).collect()
}

/// Split a manifest under `protocol`. Output id lists are sorted, so the
/// result does not depend on manifest row order.
pub fn split(manifest: &Manifest, protocol: Protocol, seed: u64) -> Result<SplitManifest> {
    let mut entries: Vec<&ManifestEntry> = manifest.entries.iter().collect();
    entries.sort_by_key(|e| e.id);
    if entries.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(Error::Validation("manifest lists a sample id twice".into()));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    match protocol {
        Protocol::Random => {
            let mut by_source: BTreeMap<u32, Vec<SampleId>> = BTreeMap::new();
            for e in &entries {
                by_source.entry(e.id.dataset).or_default().push(e.id);
            }
            for (dataset, mut ids) in by_source {
                ids.shuffle(&mut seed::rng_at(seed, &[dataset as u64]));
                let n_train = (6 * ids.len() + 5) / 10;
                train.extend_from_slice(&ids[..n_train]);
                test.extend_from_slice(&ids[n_train..]);
            }
        }
        Protocol::CSub => {
            for e in &entries {
                let Some(&(_, limit)) = CSUB_TRAIN_SUBJECTS.iter().find(|(d, _)| *d == e.id.dataset) else {
                    continue;
                };
                if local_subject(e)? < limit {
                    train.push(e.id);
                } else {
                    test.push(e.id);
                }
            }
        }
        Protocol::CSet => {
            let classes = labels_of(&entries, |d| d == THIRD);
            for e in entries.iter().filter(|e| classes.contains(&e.label)) {
                source_of(e)?;
                if e.id.dataset == THIRD && CSET_TEST_SCENES.contains(&local_scene(e)?) {
                    test.push(e.id);
                } else {
                    train.push(e.id);
                }
            }
        }
        Protocol::StrictCrossSource => {
            let seen = labels_of(&entries, |d| d == FIRST || d == SECOND);
            let shared: BTreeSet<usize> = labels_of(&entries, |d| d == THIRD).intersection(&seen).copied().collect();
            for e in entries.iter().filter(|e| shared.contains(&e.label)) {
                match e.id.dataset {
                    FIRST | SECOND => train.push(e.id),
                    THIRD => test.push(e.id),
                    _ => {
                        source_of(e)?;
                    }
                }
            }
        }
    }
    train.sort();
    test.sort();
    Ok(SplitManifest { protocol, train, test })
}

#[derive(Serialize, Deserialize)]
struct Row {
    protocol: String,
    split: String,
    id: String,
}

impl SplitManifest {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (name, ids) in [("train", &self.train), ("test", &self.test)] {
            for id in ids {
                w.serialize(Row {
                    protocol: self.protocol.to_string(),
                    split: name.into(),
                    id: id.encode()?,
                })
                .map_err(|e| Error::Validation(e.to_string()))?;
            }
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Validation(e.to_string()))?).expect("csv is utf-8"))
    }

    pub fn from_csv(text: &str, default_protocol: Protocol) -> Result<Self> {
        let mut out = SplitManifest {
            protocol: default_protocol,
            train: Vec::new(),
            test: Vec::new(),
        };
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        for (i, rec) in rdr.deserialize::<Row>().enumerate() {
            let row = rec.map_err(|e| ParseError::Malformed {
                row: i + 2,
                reason: e.to_string(),
            })?;
            out.protocol = row.protocol.parse()?;
            let id = SampleId::decode(&row.id)?;
            match row.split.as_str() {
                "train" => out.train.push(id),
                "test" => out.test.push(id),
                other => {
                    return Err(ParseError::Malformed {
                        row: i + 2,
                        reason: format!("split must be train or test, got `{other}`"),
                    }
                    .into())
                }
            }
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, Protocol::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(dataset: u32, label: usize, env: u32, subject: u32, seq: u32) -> ManifestEntry {
        ManifestEntry {
            id: SampleId::new(dataset, label as u32 + 1, env, subject, seq).unwrap(),
            label,
            source: format!("s{dataset}"),
            path: "x.zip".into(),
        }
    }

    /// Every subject/scene combination of all three sources, two classes
    /// per source plus one class unique to the third.
    fn toy() -> Manifest {
        let mut m = Manifest::new(".");
        let mut seq = 1;
        for src in crate::taxonomy::SOURCES.iter() {
            for subj in 0..src.subjects {
                for scene in 0..src.scenes {
                    let labels: &[usize] = if src.dataset_idx == THIRD { &[0, 1, 5] } else { &[0, 1, 2] };
                    for &label in labels {
                        m.entries.push(entry(src.dataset_idx, label, src.global_scene(scene), src.global_subject(subj), seq));
                        seq += 1;
                    }
                }
            }
        }
        m
    }

    #[test]
    fn protocol_names_round_trip() {
        for p in Protocol::ALL {
            assert_eq!(p.to_string().parse::<Protocol>().unwrap(), p);
        }
        assert!(matches!("cross".parse::<Protocol>(), Err(Error::Config(_))));
    }

    #[test]
    fn random_is_sixty_forty_per_source() {
        let m = toy();
        let s = split(&m, Protocol::Random, 3).unwrap();
        for d in 1..=3 {
            let n = m.entries.iter().filter(|e| e.id.dataset == d).count();
            let tr = s.train.iter().filter(|id| id.dataset == d).count();
            assert_eq!(tr, (6 * n + 5) / 10);
        }
        assert_ne!(s, split(&m, Protocol::Random, 4).unwrap());
    }

    #[test]
    fn csub_uses_subject_ranges_and_drops_first_source() {
        let s = split(&toy(), Protocol::CSub, 0).unwrap();
        assert!(s.train.iter().chain(&s.test).all(|id| id.dataset != 1));
        // second source: 10 train subjects x 3 labels; third: 20 x 4 scenes x 3
        assert_eq!(s.train.len(), 10 * 3 + 20 * 4 * 3);
        assert_eq!(s.test.len(), 10 * 3 + 20 * 4 * 3);
        assert!(s.train.iter().all(|id| (id.dataset == 2 && id.subject <= 12) || (id.dataset == 3 && id.subject <= 42)));
    }

    #[test]
    fn cset_holds_out_two_scenes_of_third_source_classes() {
        let s = split(&toy(), Protocol::CSet, 0).unwrap();
        assert!(s.test.iter().all(|id| id.dataset == 3 && id.env <= 4));
        assert_eq!(s.test.len(), 40 * 2 * 3);
        assert!(s.train.iter().chain(&s.test).all(|id| id.action != 3));
    }

    #[test]
    fn strict_cross_source_keeps_shared_classes() {
        let s = split(&toy(), Protocol::StrictCrossSource, 0).unwrap();
        assert!(s.train.iter().all(|id| id.dataset != 3));
        assert!(s.test.iter().all(|id| id.dataset == 3));
        let classes: BTreeSet<u32> = s.test.iter().map(|id| id.action).collect();
        assert_eq!(classes, BTreeSet::from([1, 2]));
        assert!(s.train.iter().all(|id| id.action <= 2));
    }

    #[test]
    fn missing_subject_metadata_errors() {
        let mut m = toy();
        m.entries.push(entry(2, 0, 2, 60, 9999));
        assert!(split(&m, Protocol::CSub, 0).is_err());
        m.entries.pop();
        m.entries.push(entry(9, 0, 1, 1, 9999));
        assert!(split(&m, Protocol::CSet, 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let s = split(&toy(), Protocol::Random, 1).unwrap();
        let back = SplitManifest::from_csv(&s.to_csv().unwrap(), Protocol::CSub).unwrap();
        assert_eq!(back, s);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn splits_are_disjoint_deterministic_and_order_free(seed in any::<u64>(), rot in 0usize..500) {
            let m = toy();
            let mut shuffled = m.clone();
            let n = shuffled.entries.len();
            shuffled.entries.rotate_left(rot % n);
            for p in Protocol::ALL {
                let a = split(&m, p, seed).unwrap();
                prop_assert_eq!(&a, &split(&shuffled, p, seed).unwrap());
                let train: BTreeSet<_> = a.train.iter().collect();
                prop_assert!(a.test.iter().all(|id| !train.contains(id)));
                prop_assert!(a.train.iter().chain(&a.test).all(|id| m.find(id).is_some()));
            }
        }
    }
}
