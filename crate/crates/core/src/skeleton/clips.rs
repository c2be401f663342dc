use super::{SampleLabel, SkeletonSequence, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLIPS: usize = 7;

/// A sample laid out as `[7 × T × 25 × C_in]` (x, y and optionally confidence).
#[derive(Clone, Debug)]
pub struct ClipBatch {
    pub sample_id: String,
    pub clips: Tensor,
    pub label: Option<SampleLabel>,
}

impl ClipBatch {
    pub fn frames_per_clip(&self) -> usize {
        self.clips.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.clips.shape()[3]
    }

    pub fn with_label(mut self, label: SampleLabel) -> Self {
        self.label = Some(label);
        self
    }
}

/// Start frame of each clip for a sequence of `len >= 7T` frames: evenly
/// spread so the first clip starts at 0 and the last ends at `len`.
pub fn clip_starts(len: usize, t: usize) -> Vec<usize> {
    debug_assert!(len >= NUM_CLIPS * t);
    (0..NUM_CLIPS)
        .map(|i| i * (len - t) / (NUM_CLIPS - 1))
        .collect()
}

/// Splits a sequence into 7 non-overlapping clips of `t` frames. Sequences
/// shorter than `7t` are extended by cycling from frame 0 and split
/// contiguously.
pub fn segment_clips(seq: &SkeletonSequence, t: usize, channels: usize) -> Result<ClipBatch> {
    if t < 2 {
        return Err(Error::Config(format!("clip length must be >= 2, got {t}")));
    }
    if !(channels == 2 || channels == 3) {
        return Err(Error::Config(format!(
            "input channels must be 2 or 3, got {channels}"
        )));
    }
    if seq.is_empty() {
        return Err(Error::DegenerateSequence(format!(
            "sample {} has no frames",
            seq.sample_id
        )));
    }
    let len = seq.len();
    let frame_ids: Vec<usize> = if len >= NUM_CLIPS * t {
        clip_starts(len, t)
            .into_iter()
            .flat_map(|s| s..s + t)
            .collect()
    } else {
        (0..NUM_CLIPS * t).map(|k| k % len).collect()
    };
    let mut data = Vec::with_capacity(frame_ids.len() * NUM_JOINTS * channels);
    for &f in &frame_ids {
        for j in &seq.frames[f].joints {
            data.push(j.x);
            data.push(j.y);
            if channels == 3 {
                data.push(j.confidence);
            }
        }
    }
    Ok(ClipBatch {
        sample_id: seq.sample_id.clone(),
        clips: Tensor::new(vec![NUM_CLIPS, t, NUM_JOINTS, channels], data)?,
        label: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{Joint, RawFrame};

    fn ramp(len: usize) -> SkeletonSequence {
        let frames = (0..len)
            .map(|i| RawFrame::new([Joint::new(i as f64, 0.0, 1.0); NUM_JOINTS], i))
            .collect();
        SkeletonSequence::new("ramp", frames)
    }

    #[test]
    fn exact_fit_starts() {
        assert_eq!(clip_starts(112, 16), vec![0, 16, 32, 48, 64, 80, 96]);
    }

    #[test]
    fn spread_starts() {
        assert_eq!(clip_starts(200, 16), vec![0, 30, 61, 92, 122, 153, 184]);
    }

    #[test]
    fn short_sequences_cycle() {
        let batch = segment_clips(&ramp(50), 16, 2).unwrap();
        assert_eq!(batch.clips.shape(), &[7, 16, 25, 2]);
        for k in 0..112 {
            let (clip, t) = (k / 16, k % 16);
            assert_eq!(batch.clips.at(&[clip, t, 0, 0]), (k % 50) as f64);
        }
    }

    #[test]
    fn clip_content_follows_starts() {
        let batch = segment_clips(&ramp(200), 16, 3).unwrap();
        assert_eq!(batch.clips.at(&[3, 0, 5, 0]), 92.0);
        assert_eq!(batch.clips.at(&[6, 15, 5, 0]), 199.0);
        assert_eq!(batch.clips.at(&[6, 15, 5, 2]), 1.0);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(segment_clips(&ramp(20), 1, 2).is_err());
        assert!(segment_clips(&ramp(20), 4, 4).is_err());
        assert!(segment_clips(&ramp(0), 4, 2).is_err());
    }
}
