use crate::clip::SourceMeta;
use crate::error::{ParseError, Result};
use crate::ingest::{PointRow, RawSequence};

const COLUMNS: [&str; 6] = ["Frame", "X", "Y", "Z", "Doppler", "Intensity"];

fn reader(bytes: &[u8]) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(bytes)
}

fn column_positions<const N: usize>(
    headers: &csv::StringRecord,
    wanted: [&str; N],
) -> Result<[usize; N]> {
    let mut pos = [0usize; N];
    for (slot, name) in pos.iter_mut().zip(wanted) {
        *slot = headers
            .iter()
            .position(|h| h.trim_start_matches('\u{feff}').eq_ignore_ascii_case(name))
            .ok_or_else(|| ParseError::MissingColumn(name.to_string()))?;
    }
    Ok(pos)
}

fn cell<'a>(rec: &'a csv::StringRecord, pos: usize, row: usize, column: &str) -> Result<&'a str> {
    rec.get(pos).ok_or_else(|| {
        ParseError::Malformed {
            row,
            reason: format!("missing value for column `{column}`"),
        }
        .into()
    })
}

fn number(rec: &csv::StringRecord, pos: usize, row: usize, column: &str) -> Result<f64> {
    let raw = cell(rec, pos, row, column)?;
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| {
            ParseError::NonNumeric {
                row,
                column: column.to_string(),
                value: raw.to_string(),
            }
            .into()
        })
}

/// Parse a point CSV with header `Frame,X,Y,Z,Doppler,Intensity` (any
/// column order, case-insensitive). Row numbers in errors are file line
/// numbers, the header being line 1.
pub fn parse_source_csv(bytes: &[u8], source: SourceMeta) -> Result<RawSequence> {
    if bytes.iter().all(|b| b.is_ascii_whitespace()) {
        return Err(ParseError::Empty.into());
    }
    let mut rdr = reader(bytes);
    let headers = rdr
        .headers()
        .map_err(|e| ParseError::Malformed {
            row: 1,
            reason: e.to_string(),
        })?
        .clone();
    let pos = column_positions(&headers, COLUMNS)?;
    let mut rows = Vec::new();
    let mut previous = i64::MIN;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| ParseError::Malformed {
            row,
            reason: e.to_string(),
        })?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let frame_value = number(&rec, pos[0], row, COLUMNS[0])?;
        if frame_value.fract() != 0.0 {
            return Err(ParseError::NonNumeric {
                row,
                column: COLUMNS[0].into(),
                value: rec[pos[0]].to_string(),
            }
            .into());
        }
        let frame = frame_value as i64;
        if frame < previous {
            return Err(ParseError::FrameOrder {
                row,
                frame,
                previous,
            }
            .into());
        }
        previous = frame;
        let mut values = [0f32; 5];
        for (k, v) in values.iter_mut().enumerate() {
            *v = number(&rec, pos[k + 1], row, COLUMNS[k + 1])? as f32;
        }
        rows.push(PointRow { frame, values });
    }
    if rows.is_empty() {
        return Err(ParseError::Empty.into());
    }
    Ok(RawSequence::new(rows, source))
}

/// Label attached to a segment: either a unified class index or an original
/// source label still to be mapped through the taxonomy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SegmentLabel {
    Index(usize),
    Name(String),
}

/// Inclusive frame range `[start, end]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub start: i64,
    pub end: i64,
    pub label: Option<SegmentLabel>,
}

/// Parse a segmentation table with columns `sequence,start,end,label`.
/// Returns `(sequence id, segment)` pairs in file order.
pub fn parse_segments(bytes: &[u8]) -> Result<Vec<(String, Segment)>> {
    if bytes.iter().all(|b| b.is_ascii_whitespace()) {
        return Err(ParseError::Empty.into());
    }
    let mut rdr = reader(bytes);
    let headers = rdr
        .headers()
        .map_err(|e| ParseError::Malformed {
            row: 1,
            reason: e.to_string(),
        })?
        .clone();
    let names = ["sequence", "start", "end", "label"];
    let pos = column_positions(&headers, names)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| ParseError::Malformed {
            row,
            reason: e.to_string(),
        })?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let seq = cell(&rec, pos[0], row, names[0])?.to_string();
        let start = number(&rec, pos[1], row, names[1])? as i64;
        let end = number(&rec, pos[2], row, names[2])? as i64;
        let raw = cell(&rec, pos[3], row, names[3])?;
        let label = match raw.parse::<usize>() {
            Ok(i) => SegmentLabel::Index(i),
            Err(_) => SegmentLabel::Name(raw.to_string()),
        };
        out.push((
            seq,
            Segment {
                start,
                end,
                label: Some(label),
            },
        ));
    }
    Ok(out)
}
