//! Dataset-aware preprocessing: per-source CSV parsing, sliding windows and
//! action segmentation, standardization to `[32, 64, 5]` clips and
//! normalization.

mod manifest;
mod normalize;
mod parse;
mod prep;
mod standardize;
mod window;

pub use manifest::{Manifest, ManifestEntry};
pub use normalize::{normalize, NormStats, STD_FLOOR};
pub use parse::{parse_segments, parse_source_csv, Segment, SegmentLabel};
pub use prep::{prep_source, PrepSummary, INDEX_FILE, SEGMENTS_FILE};
pub use standardize::{
    cyclic_repeat, farthest_point_sample, standardize_clip, standardize_frames, temporal_indices,
};
pub use window::{segment_actions, slide_windows};

use serde::{Deserialize, Serialize};

use crate::clip::{SampleId, SourceMeta, CHANNELS};
use crate::error::{Error, Result};

/// One detected point: frame index plus `(x, y, z, doppler, intensity)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointRow {
    pub frame: i64,
    pub values: [f32; CHANNELS],
}

/// A parsed, not yet standardized point cloud sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSequence {
    pub rows: Vec<PointRow>,
    pub source: SourceMeta,
    pub label: Option<usize>,
    pub id: Option<SampleId>,
}

impl RawSequence {
    pub fn new(rows: Vec<PointRow>, source: SourceMeta) -> Self {
        RawSequence {
            rows,
            source,
            label: None,
            id: None,
        }
    }

    /// Group rows by frame index, in file order. Each entry is
    /// `(frame index, rows)`.
    pub fn frames(&self) -> Vec<(i64, &[PointRow])> {
        let mut out: Vec<(i64, &[PointRow])> = Vec::new();
        let mut start = 0;
        for i in 1..=self.rows.len() {
            if i == self.rows.len() || self.rows[i].frame != self.rows[start].frame {
                out.push((self.rows[start].frame, &self.rows[start..i]));
                start = i;
            }
        }
        out
    }

    pub fn frame_count(&self) -> usize {
        self.frames().len()
    }

    /// New sequence holding `frames` re-based so the first one is frame 0.
    pub(crate) fn from_frames(&self, frames: &[(i64, &[PointRow])]) -> RawSequence {
        let rows = frames
            .iter()
            .enumerate()
            .flat_map(|(k, (_, rows))| {
                rows.iter().map(move |r| PointRow {
                    frame: k as i64,
                    values: r.values,
                })
            })
            .collect();
        RawSequence {
            rows,
            source: self.source.clone(),
            label: self.label,
            id: self.id,
        }
    }
}

/// How a source's long recordings are cut into clips.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PreprocessPolicy {
    SlidingWindow { window: usize, stride: usize },
    Segmentation { segments: Vec<(i64, i64)> },
    Passthrough,
}

impl PreprocessPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            PreprocessPolicy::SlidingWindow { window, stride } => {
                if *window == 0 || *stride == 0 {
                    return Err(Error::Validation(format!(
                        "window ({window}) and stride ({stride}) must be at least 1"
                    )));
                }
                Ok(())
            }
            PreprocessPolicy::Segmentation { segments } => {
                window::check_segments(segments.iter().copied(), None).map(|_| ())
            }
            PreprocessPolicy::Passthrough => Ok(()),
        }
    }

    /// Apply the policy, returning the produced sub-sequences in order.
    pub fn apply(&self, seq: &RawSequence) -> Result<Vec<RawSequence>> {
        self.validate()?;
        match self {
            PreprocessPolicy::SlidingWindow { window, stride } => {
                slide_windows(seq, *window, *stride)
            }
            PreprocessPolicy::Segmentation { segments } => {
                let segs: Vec<Segment> = segments
                    .iter()
                    .map(|&(start, end)| Segment {
                        start,
                        end,
                        label: None,
                    })
                    .collect();
                Ok(segment_actions(seq, &segs)?
                    .into_iter()
                    .map(|(s, _)| s)
                    .collect())
            }
            PreprocessPolicy::Passthrough => Ok(vec![seq.clone()]),
        }
    }
}


#[cfg(test)]
mod tests {
    use super::test_util::*;
    use super::*;

    #[test]
    fn frames_group_consecutive_rows() {
        let mut seq = seq_with_counts(&[2, 1]);
        assert_eq!(
            seq.frames().iter().map(|(_, r)| r.len()).collect::<Vec<_>>(),
            vec![2, 1]
        );
        seq.rows.clear();
        assert!(seq.frames().is_empty());
    }

    #[test]
    fn policy_rejects_zero_window() {
        let p = PreprocessPolicy::SlidingWindow {
            window: 0,
            stride: 1,
        };
        assert!(p.apply(&seq_with_counts(&[1; 4])).is_err());
        let p = PreprocessPolicy::Segmentation {
            segments: vec![(0, 5), (3, 8)],
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn passthrough_is_identity() {
        let seq = seq_with_counts(&[3, 2, 1]);
        let out = PreprocessPolicy::Passthrough.apply(&seq).unwrap();
        assert_eq!(out, vec![seq]);
    }
}
