use crate::error::{Error, Result};
use crate::ingest::{RawSequence, Segment, SegmentLabel};

/// Cut a sequence into full windows of `window` distinct frames starting at
/// frame offsets `0, stride, 2*stride, ...`. Partial windows are never
/// emitted; each window's frames are re-based to start at 0.
pub fn slide_windows(seq: &RawSequence, window: usize, stride: usize) -> Result<Vec<RawSequence>> {
    if window == 0 || stride == 0 {
        return Err(Error::Validation(format!(
            "window ({window}) and stride ({stride}) must be at least 1"
        )));
    }
    let frames = seq.frames();
    if window > frames.len() {
        return Err(Error::Validation(format!(
            "window of {window} frames exceeds the {} frames available",
            frames.len()
        )));
    }
    Ok((0..=frames.len() - window)
        .step_by(stride)
        .map(|start| seq.from_frames(&frames[start..start + window]))
        .collect())
}

/// Check that segments are ordered, non-overlapping, non-empty and (when
/// `range` is given) inside the inclusive frame range.
pub(crate) fn check_segments(
    segments: impl IntoIterator<Item = (i64, i64)>,
    range: Option<(i64, i64)>,
) -> Result<usize> {
    let mut prev_end: Option<i64> = None;
    let mut n = 0;
    for (i, (start, end)) in segments.into_iter().enumerate() {
        if end < start {
            return Err(Error::Validation(format!(
                "segment {i} ({start}, {end}) ends before it starts"
            )));
        }
        if let Some(p) = prev_end {
            if start <= p {
                return Err(Error::Validation(format!(
                    "segment {i} ({start}, {end}) overlaps or precedes the previous segment ending at {p}"
                )));
            }
        }
        if let Some((lo, hi)) = range {
            if start < lo || end > hi {
                return Err(Error::Validation(format!(
                    "segment {i} ({start}, {end}) outside frame range ({lo}, {hi})"
                )));
            }
        }
        prev_end = Some(end);
        n += 1;
    }
    Ok(n)
}

/// Split a sequence into inclusive frame-range segments. Rows outside all
/// segments are dropped; frames inside each segment are re-based so the
/// segment's start frame becomes 0.
pub fn segment_actions(
    seq: &RawSequence,
    segments: &[Segment],
) -> Result<Vec<(RawSequence, Option<SegmentLabel>)>> {
    if segments.is_empty() {
        return Ok(Vec::new());
    }
    let frames = seq.frames();
    let range = match (frames.first(), frames.last()) {
        (Some(a), Some(b)) => (a.0, b.0),
        _ => return Err(Error::Validation("cannot segment an empty sequence".into())),
    };
    check_segments(segments.iter().map(|s| (s.start, s.end)), Some(range))?;
    let mut out = Vec::with_capacity(segments.len());
    for seg in segments {
        let rows = seq
            .rows
            .iter()
            .filter(|r| r.frame >= seg.start && r.frame <= seg.end)
            .map(|r| crate::ingest::PointRow {
                frame: r.frame - seg.start,
                values: r.values,
            })
            .collect();
        let mut sub = seq.clone();
        sub.rows = rows;
        out.push((sub, seg.label.clone()));
    }
    Ok(out)
}
