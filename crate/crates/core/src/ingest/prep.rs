//! Whole-directory preprocessing of one source into clip archives.
//!
//! A source directory holds point CSV files plus `index.csv` with columns
//! `file,subject,scene,action`: the point file relative to the directory,
//! the 1-based subject and scene numbers within the source, and the
//! source's own action name. Sources cut by segmentation also need
//! `segments.csv` (`sequence,start,end,label`), where `sequence` is the
//! point file's stem and `label` names the source action of each segment;
//! for them the `action` column may stay empty.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::archive::write_clip_archive;
use crate::clip::SampleId;
use crate::error::{Error, ParseError, Result};
use crate::ingest::{
    parse_segments, parse_source_csv, segment_actions, slide_windows, standardize_clip, Manifest, ManifestEntry,
    RawSequence, Segment, SegmentLabel,
};
use crate::par::{self, Parallelism};
use crate::taxonomy::{source_by_key, taxonomy, unify, PolicyKind, SourceInfo};

pub const INDEX_FILE: &str = "index.csv";
pub const SEGMENTS_FILE: &str = "segments.csv";

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
struct IndexRow {
    file: PathBuf,
    subject: u32,
    #[serde(default)]
    scene: Option<u32>,
    #[serde(default)]
    action: Option<String>,
}

/// What a preprocessing run produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrepSummary {
    pub files: usize,
    pub frames: usize,
    pub clips: usize,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_index(dir: &Path) -> Result<Vec<IndexRow>> {
    let path = dir.join(INDEX_FILE);
    let bytes = read(&path)?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes.as_slice());
    let rows = rdr
        .deserialize::<IndexRow>()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| {
                ParseError::Malformed {
                    row: i + 2,
                    reason: format!("{}: {e}", path.display()),
                }
                .into()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(ParseError::Empty.into());
    }
    Ok(rows)
}

fn unified(info: &SourceInfo, original: &str) -> Result<usize> {
    unify(info.key, original).ok_or_else(|| {
        Error::Validation(format!(
            "action `{original}` of source `{}` is not in the unified taxonomy",
            info.key
        ))
    })
}

fn segment_label(info: &SourceInfo, label: &Option<SegmentLabel>, stem: &str) -> Result<usize> {
    match label {
        Some(SegmentLabel::Name(n)) => unified(info, n),
        Some(SegmentLabel::Index(i)) if *i < taxonomy().len() => Ok(*i),
        Some(SegmentLabel::Index(i)) => Err(Error::Validation(format!("segment label {i} of `{stem}` is not a class id"))),
        None => Err(Error::Validation(format!("a segment of `{stem}` has no label"))),
    }
}

/// Cut one recording into labelled clips according to the source policy.
fn cut(
    info: &SourceInfo,
    row: &IndexRow,
    seq: &RawSequence,
    segments: &BTreeMap<String, Vec<Segment>>,
) -> Result<Vec<(RawSequence, usize)>> {
    let stem = row.file.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
    let segmented = || -> Result<Vec<(RawSequence, usize)>> {
        let segs = segments.get(&stem).map(Vec::as_slice).unwrap_or_default();
        segment_actions(seq, segs)?
            .into_iter()
            .map(|(s, l)| Ok((s, segment_label(info, &l, &stem)?)))
            .collect()
    };
    match info.policy {
        PolicyKind::Sliding { window, stride } => {
            let action = row.action.as_deref().filter(|a| !a.is_empty()).ok_or_else(|| {
                Error::Validation(format!("`{}` has no action in {INDEX_FILE}", row.file.display()))
            })?;
            let label = unified(info, action)?;
            Ok(slide_windows(seq, window, stride)?.into_iter().map(|w| (w, label)).collect())
        }
        PolicyKind::SegmentThenSliding { window, stride } => {
            let mut out = Vec::new();
            for (s, label) in segmented()? {
                // segments shorter than one window yield no clip
                if s.frame_count() >= window {
                    out.extend(slide_windows(&s, window, stride)?.into_iter().map(|w| (w, label)));
                }
            }
            Ok(out)
        }
        PolicyKind::Segmentation => segmented(),
    }
}

/// Preprocess every recording of `source` under `dir` and write
/// `clips/{id}.zip` plus `manifest.csv` under `out_dir`. Sequence numbers
/// count clips per action, scene and subject in index order, so reruns
/// produce identical output.
pub fn prep_source(dir: &Path, source: &str, out_dir: &Path, mode: Parallelism) -> Result<(Manifest, PrepSummary)> {
    let info = source_by_key(source)?;
    let index = read_index(dir)?;
    let segments = match info.policy {
        PolicyKind::Sliding { .. } => BTreeMap::new(),
        _ => {
            let mut by_seq: BTreeMap<String, Vec<Segment>> = BTreeMap::new();
            for (seq, seg) in parse_segments(&read(&dir.join(SEGMENTS_FILE))?)? {
                by_seq.entry(seq).or_default().push(seg);
            }
            by_seq
        }
    };
    for row in &index {
        if row.subject == 0 || row.subject > info.subjects {
            return Err(Error::Validation(format!(
                "subject {} of `{}` outside 1..={}",
                row.subject,
                row.file.display(),
                info.subjects
            )));
        }
        let scene = row.scene.unwrap_or(1);
        if scene == 0 || scene > info.scenes {
            return Err(Error::Validation(format!(
                "scene {scene} of `{}` outside 1..={}",
                row.file.display(),
                info.scenes
            )));
        }
    }

    let cut_files = par::map(mode, &index, |_, row| -> Result<(usize, Vec<(RawSequence, usize)>)> {
        let seq = parse_source_csv(&read(&dir.join(&row.file))?, info.meta())?;
        Ok((seq.frame_count(), cut(info, row, &seq, &segments)?))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut counters: BTreeMap<(usize, u32, u32), u32> = BTreeMap::new();
    let mut jobs = Vec::new();
    for (row, (_, clips)) in index.iter().zip(&cut_files) {
        let scene = info.global_scene(row.scene.unwrap_or(1) - 1);
        let subject = info.global_subject(row.subject - 1);
        for (seq, label) in clips {
            let n = counters.entry((*label, scene, subject)).or_insert(0);
            *n += 1;
            let id = SampleId::new(info.dataset_idx, *label as u32 + 1, scene, subject, *n)?;
            jobs.push((id, *label, seq));
        }
    }

    let clips_dir = out_dir.join("clips");
    std::fs::create_dir_all(&clips_dir).map_err(|e| Error::io(&clips_dir, e))?;
    let meta = info.meta();
    let names = taxonomy();
    let entries = par::map(mode, &jobs, |_, (id, label, seq)| -> Result<ManifestEntry> {
        let clip = standardize_clip(seq)?;
        let rel = Path::new("clips").join(format!("{id}.zip"));
        write_clip_archive(&out_dir.join(&rel), &clip, *id, *label, &names[*label].name, &meta)?;
        Ok(ManifestEntry {
            id: *id,
            label: *label,
            source: info.key.to_string(),
            path: rel,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut manifest = Manifest::new(out_dir);
    manifest.entries = entries;
    manifest.write(&out_dir.join("manifest.csv"))?;
    let summary = PrepSummary {
        files: index.len(),
        frames: cut_files.iter().map(|(f, _)| f).sum(),
        clips: manifest.len(),
    };
    Ok((manifest, summary))
}
