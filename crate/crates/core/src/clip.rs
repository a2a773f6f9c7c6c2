//! Domain types shared by every stage: the standardized clip tensor, the
//! structured sample identifier, label spaces and radar source metadata.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frames per standardized clip.
pub const FRAMES: usize = 32;
/// Points per frame in a standardized clip.
pub const POINTS: usize = 64;
/// Channels per point: x, y, z (m), doppler (m/s), intensity.
pub const CHANNELS: usize = 5;

pub const CH_X: usize = 0;
pub const CH_Y: usize = 1;
pub const CH_Z: usize = 2;
pub const CH_DOPPLER: usize = 3;
pub const CH_INTENSITY: usize = 4;

/// Which normalization pass last touched the values of a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    None,
    DatasetLevel,
    ClipLevel,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::None => "none",
            Normalization::DatasetLevel => "dataset_level",
            Normalization::ClipLevel => "clip_level",
        })
    }
}

impl FromStr for Normalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Normalization::None),
            "dataset_level" => Ok(Normalization::DatasetLevel),
            "clip_level" => Ok(Normalization::ClipLevel),
            other => Err(Error::Config(format!(
                "unknown normalization mode `{other}` (expected none, dataset_level, clip_level)"
            ))),
        }
    }
}

/// One action clip as a dense `[T, P, C]` tensor, row-major.
///
/// `point_counts[t]` is the number of distinct points recorded for frame `t`
/// during standardization; rows past that count are cyclic repeats. Padded
/// frames have a count of zero, are all-zero and are flagged in `pad_mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipTensor {
    pub frames: usize,
    pub points: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub pad_mask: Vec<bool>,
    pub point_counts: Vec<usize>,
    pub normalization: Normalization,
}

impl ClipTensor {
    pub fn zeros(frames: usize, points: usize, channels: usize) -> Self {
        ClipTensor {
            frames,
            points,
            channels,
            data: vec![0.0; frames * points * channels],
            pad_mask: vec![true; frames],
            point_counts: vec![0; frames],
            normalization: Normalization::None,
        }
    }

    pub fn is_standard(&self) -> bool {
        self.frames == FRAMES
            && self.points == POINTS
            && self.channels == CHANNELS
            && self.data.len() == FRAMES * POINTS * CHANNELS
            && self.pad_mask.len() == FRAMES
            && self.point_counts.len() == FRAMES
    }

    pub fn check_standard(&self) -> Result<()> {
        if self.is_standard() {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "clip is [{}, {}, {}] with {} values, expected [{FRAMES}, {POINTS}, {CHANNELS}]",
                self.frames,
                self.points,
                self.channels,
                self.data.len()
            )))
        }
    }

    #[inline]
    pub fn point(&self, frame: usize, point: usize) -> &[f32] {
        let start = (frame * self.points + point) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn point_mut(&mut self, frame: usize, point: usize) -> &mut [f32] {
        let start = (frame * self.points + point) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn frame(&self, frame: usize) -> &[f32] {
        let stride = self.points * self.channels;
        &self.data[frame * stride..(frame + 1) * stride]
    }

    /// Distinct (non-repeated) rows of a frame.
    pub fn distinct_rows(&self, frame: usize) -> &[f32] {
        let n = self.point_counts[frame].min(self.points);
        &self.frame(frame)[..n * self.channels]
    }

    pub fn valid_frames(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.frames).filter(move |&t| !self.pad_mask[t])
    }
}

/// Structured identifier `D{ddd}A{ddd}E{ddd}P{ddd}S{dddd}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleId {
    pub dataset: u32,
    pub action: u32,
    pub env: u32,
    pub subject: u32,
    pub seq: u32,
}

const ID_FIELDS: [(char, &str, usize); 5] = [
    ('D', "dataset", 3),
    ('A', "action", 3),
    ('E', "env", 3),
    ('P', "subject", 3),
    ('S', "seq", 4),
];

impl SampleId {
    pub fn new(dataset: u32, action: u32, env: u32, subject: u32, seq: u32) -> Result<Self> {
        let id = SampleId {
            dataset,
            action,
            env,
            subject,
            seq,
        };
        id.validate()?;
        Ok(id)
    }

    fn fields(&self) -> [u32; 5] {
        [self.dataset, self.action, self.env, self.subject, self.seq]
    }

    pub fn validate(&self) -> Result<()> {
        for ((_, name, width), value) in ID_FIELDS.iter().zip(self.fields()) {
            let limit = 10u32.pow(*width as u32) - 1;
            if value == 0 || value > limit {
                return Err(Error::SampleId(format!(
                    "field `{name}` = {value} outside [1, {limit}]"
                )));
            }
        }
        Ok(())
    }

    /// Fixed-width string form, e.g. `D001A001E001P001S0001`.
    pub fn encode(&self) -> Result<String> {
        self.validate()?;
        Ok(self.to_string())
    }

    pub fn decode(s: &str) -> Result<Self> {
        let bytes = s.as_bytes();
        let expected_len: usize = ID_FIELDS.iter().map(|(_, _, w)| w + 1).sum();
        if bytes.len() != expected_len || !s.is_ascii() {
            return Err(Error::SampleId(format!(
                "`{s}` must be {expected_len} ASCII characters"
            )));
        }
        let mut values = [0u32; 5];
        let mut pos = 0;
        for (slot, (tag, name, width)) in values.iter_mut().zip(ID_FIELDS.iter()) {
            if bytes[pos] as char != *tag {
                return Err(Error::SampleId(format!(
                    "`{s}`: expected `{tag}` at offset {pos} for field `{name}`"
                )));
            }
            let digits = &s[pos + 1..pos + 1 + width];
            if !digits.bytes().all(|b| b.is_ascii_digit()) {
                return Err(Error::SampleId(format!(
                    "`{s}`: field `{name}` is not numeric"
                )));
            }
            *slot = digits.parse().expect("digits checked");
            pos += width + 1;
        }
        SampleId::new(values[0], values[1], values[2], values[3], values[4])
    }
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "D{:03}A{:03}E{:03}P{:03}S{:04}",
            self.dataset, self.action, self.env, self.subject, self.seq
        )
    }
}

impl FromStr for SampleId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SampleId::decode(s)
    }
}

/// Ordered list of action class names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    names: Vec<String>,
}

impl LabelSpace {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Validation("label space has no classes".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Validation(format!("duplicate class name `{n}`")));
            }
        }
        Ok(LabelSpace { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Radar source description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceMeta {
    pub name: String,
    /// Carrier frequency in Hz.
    pub carrier_frequency: f64,
    /// Frame rate in Hz.
    pub frame_rate: f64,
    #[serde(default)]
    pub notes: String,
}

impl SourceMeta {
    pub fn new(name: impl Into<String>, carrier_frequency: f64, frame_rate: f64) -> Result<Self> {
        let meta = SourceMeta {
            name: name.into(),
            carrier_frequency,
            frame_rate,
            notes: String::new(),
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.carrier_frequency > 0.0 && self.carrier_frequency.is_finite()) {
            return Err(Error::Validation(format!(
                "source `{}`: carrier frequency must be positive",
                self.name
            )));
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "source `{}`: frame rate must be positive",
                self.name
            )));
        }
        Ok(())
    }
}
