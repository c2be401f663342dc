//! Pose ingestion: OpenPose BODY_25 records, athlete selection, frame
//! filtering, K-hop joint repair, normalization and clip segmentation.

mod clean;
mod clips;
mod graph;
mod io;
mod openpose;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use clean::{
    clean_sequence, filter_frames, interpolate_missing, normalize_sequence, repair_sequence,
    INTERPOLATED_CONFIDENCE, MAX_MISSING_JOINTS, MIN_VALID_JOINTS,
};
pub use clips::{clip_starts, segment_clips, ClipBatch, NUM_CLIPS};
pub use graph::{build_adjacency, AdjacencyGraph, BODY25_EDGES};
pub use io::{read_labels, read_sequence, write_labels, write_sequence, Gender, SampleLabel};
pub use openpose::{load_pose_dir, parse_openpose_frame, select_athlete, write_openpose_frame};

pub const NUM_JOINTS: usize = 25;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "Nose",
    "Neck",
    "RShoulder",
    "RElbow",
    "RWrist",
    "LShoulder",
    "LElbow",
    "LWrist",
    "MidHip",
    "RHip",
    "RKnee",
    "RAnkle",
    "LHip",
    "LKnee",
    "LAnkle",
    "REye",
    "LEye",
    "REar",
    "LEar",
    "LBigToe",
    "LSmallToe",
    "LHeel",
    "RBigToe",
    "RSmallToe",
    "RHeel",
];

pub const NECK: usize = 1;
pub const MID_HIP: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Joint {
    /// Undetected joints are reported at the origin with zero confidence.
    pub const MISSING: Joint = Joint {
        x: 0.0,
        y: 0.0,
        confidence: 0.0,
    };

    pub fn new(x: f64, y: f64, confidence: f64) -> Self {
        Self { x, y, confidence }
    }

    pub fn is_valid(&self) -> bool {
        self.confidence > 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawFrame {
    pub joints: [Joint; NUM_JOINTS],
    pub frame_index: usize,
}

impl RawFrame {
    pub fn new(joints: [Joint; NUM_JOINTS], frame_index: usize) -> Self {
        Self {
            joints,
            frame_index,
        }
    }

    pub fn valid_count(&self) -> usize {
        self.joints.iter().filter(|j| j.is_valid()).count()
    }

    pub fn missing(&self) -> impl Iterator<Item = usize> + '_ {
        self.joints
            .iter()
            .enumerate()
            .filter(|(_, j)| !j.is_valid())
            .map(|(i, _)| i)
    }

    /// Mean confidence over detected joints, 0 when nothing was detected.
    pub fn mean_confidence(&self) -> f64 {
        let (sum, n) = self
            .joints
            .iter()
            .filter(|j| j.is_valid())
            .fold((0.0, 0usize), |(s, n), j| (s + j.confidence, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameStatus {
    Complete,
    /// 20–24 valid joints; waiting for repair.
    NeedsRepair,
    /// Missing joints filled in by K-hop interpolation.
    Repaired,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    pub sample_id: String,
    pub frames: Vec<RawFrame>,
    pub status: Vec<FrameStatus>,
}

impl SkeletonSequence {
    pub fn new(sample_id: impl Into<String>, frames: Vec<RawFrame>) -> Self {
        let status = frames
            .iter()
            .map(|f| {
                if f.valid_count() == NUM_JOINTS {
                    FrameStatus::Complete
                } else {
                    FrameStatus::NeedsRepair
                }
            })
            .collect();
        Self {
            sample_id: sample_id.into(),
            frames,
            status,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Per-sample accounting of what preprocessing did with each frame.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    /// Frame records read.
    pub frames_in: usize,
    /// Records with an empty `people` list.
    pub no_skeleton: usize,
    /// Records holding more than one person; the athlete pick may be wrong.
    pub multi_person: usize,
    pub kept: usize,
    /// Kept frames that needed (or received) joint repair.
    pub interpolated: usize,
    pub discarded: usize,
}

impl fmt::Display for FilterReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "in={} no_skeleton={} multi_person={} kept={} interpolated={} discarded={}",
            self.frames_in,
            self.no_skeleton,
            self.multi_person,
            self.kept,
            self.interpolated,
            self.discarded
        )
    }
}
