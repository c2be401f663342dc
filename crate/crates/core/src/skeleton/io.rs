//! On-disk formats for labels and cleaned sequences.
//!
//! Cleaned sequence (`.seq`), little-endian:
//!
//! ```text
//! magic   8 bytes  "AQASEQ01"
//! frames  u32
//! joints  u32      always 25
//! values  u32      always 3 (x, y, confidence)
//! payload f64 × frames·25·3, row-major
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FrameStatus, Joint, RawFrame, SkeletonSequence, INTERPOLATED_CONFIDENCE, NUM_JOINTS};
use crate::error::{Error, Result};

const SEQ_MAGIC: &[u8; 8] = b"AQASEQ01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    /// Class index used by the gender head.
    pub fn class(self) -> usize {
        match self {
            Gender::Female => 0,
            Gender::Male => 1,
        }
    }

    pub fn from_class(c: usize) -> Self {
        if c == 0 {
            Gender::Female
        } else {
            Gender::Male
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleLabel {
    pub sample_id: String,
    pub total_score: f64,
    pub gender: Gender,
    pub difficulty: Option<f64>,
    pub event: String,
    pub year: i32,
}

impl SampleLabel {
    pub fn validate(&self) -> Result<()> {
        if !(self.total_score >= 0.0) {
            return Err(Error::Schema(format!(
                "{}: total_score {} must be non-negative",
                self.sample_id, self.total_score
            )));
        }
        if !(2008..=2021).contains(&self.year) {
            return Err(Error::Schema(format!(
                "{}: year {} outside 2008..=2021",
                self.sample_id, self.year
            )));
        }
        Ok(())
    }
}

/// Reads a label CSV with header
/// `sample_id,total_score,gender,difficulty,event,year`.
pub fn read_labels(path: &Path) -> Result<Vec<SampleLabel>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut labels = Vec::new();
    for row in reader.deserialize::<SampleLabel>() {
        let label = row.map_err(|e| csv_error(path, e))?;
        label.validate()?;
        labels.push(label);
    }
    Ok(labels)
}

pub fn write_labels(path: &Path, labels: &[SampleLabel]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for l in labels {
        writer.serialize(l).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(path, e.to_string())
    }
}

pub fn write_sequence(path: &Path, seq: &SkeletonSequence) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + seq.len() * NUM_JOINTS * 24);
    buf.extend_from_slice(SEQ_MAGIC);
    for d in [seq.len(), NUM_JOINTS, 3] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for f in &seq.frames {
        for j in &f.joints {
            for v in [j.x, j.y, j.confidence] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a `.seq` file. Frame status is recovered from the confidence
/// marker of repaired joints.
pub fn read_sequence(path: &Path, sample_id: &str) -> Result<SkeletonSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != SEQ_MAGIC {
        return Err(Error::format(path, "missing AQASEQ01 header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (frames, joints, values) = (dim(0), dim(1), dim(2));
    if joints != NUM_JOINTS || values != 3 {
        return Err(Error::format(
            path,
            format!("expected [frames, 25, 3], found [{frames}, {joints}, {values}]"),
        ));
    }
    let payload = &bytes[20..];
    if payload.len() != frames * joints * values * 8 {
        return Err(Error::format(
            path,
            format!("payload holds {} bytes, header implies {}", payload.len(), frames * joints * values * 8),
        ));
    }
    let vals: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut out = Vec::with_capacity(frames);
    let mut status = Vec::with_capacity(frames);
    for (i, chunk) in vals.chunks_exact(NUM_JOINTS * 3).enumerate() {
        let mut js = [Joint::MISSING; NUM_JOINTS];
        for (j, v) in chunk.chunks_exact(3).enumerate() {
            js[j] = Joint::new(v[0], v[1], v[2]);
        }
        let repaired = js.iter().any(|j| j.confidence == INTERPOLATED_CONFIDENCE);
        status.push(if repaired {
            FrameStatus::Repaired
        } else if js.iter().all(|j| j.is_valid()) {
            FrameStatus::Complete
        } else {
            FrameStatus::NeedsRepair
        });
        out.push(RawFrame::new(js, i));
    }
    Ok(SkeletonSequence {
        sample_id: sample_id.to_string(),
        frames: out,
        status,
    })
}
