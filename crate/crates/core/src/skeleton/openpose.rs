use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FilterReport, Joint, RawFrame, SkeletonSequence, NUM_JOINTS};
use crate::error::{Error, Result};

const KEYPOINT_LEN: usize = NUM_JOINTS * 3;

#[derive(Deserialize)]
struct PoseRecord {
    people: Vec<Person>,
}

#[derive(Deserialize)]
struct Person {
    pose_keypoints_2d: Vec<f64>,
}

#[derive(Serialize)]
struct PoseRecordOut<'a> {
    version: f64,
    people: Vec<PersonOut<'a>>,
}

#[derive(Serialize)]
struct PersonOut<'a> {
    person_id: [i32; 1],
    pose_keypoints_2d: &'a [f64],
}

/// Decodes one OpenPose JSON record into one frame per detected person.
pub fn parse_openpose_frame(record: &str, frame_index: usize) -> Result<Vec<RawFrame>> {
    let parsed: PoseRecord = serde_json::from_str(record).map_err(|e| {
        let offset = byte_offset(record, e.line(), e.column());
        match e.classify() {
            serde_json::error::Category::Data => Error::Schema(e.to_string()),
            _ => Error::Parse {
                offset,
                message: e.to_string(),
            },
        }
    })?;
    parsed
        .people
        .iter()
        .enumerate()
        .map(|(p, person)| {
            let kp = &person.pose_keypoints_2d;
            if kp.len() != KEYPOINT_LEN {
                return Err(Error::Schema(format!(
                    "person {p}: expected {KEYPOINT_LEN} keypoint values, got {}",
                    kp.len()
                )));
            }
            let mut joints = [Joint::MISSING; NUM_JOINTS];
            for (j, chunk) in kp.chunks_exact(3).enumerate() {
                joints[j] = Joint::new(chunk[0], chunk[1], chunk[2]);
            }
            Ok(RawFrame::new(joints, frame_index))
        })
        .collect()
}

/// Encodes frames (one per person) in the OpenPose record layout.
pub fn write_openpose_frame(people: &[RawFrame]) -> String {
    let flat: Vec<Vec<f64>> = people
        .iter()
        .map(|f| {
            f.joints
                .iter()
                .flat_map(|j| [j.x, j.y, j.confidence])
                .collect()
        })
        .collect();
    let rec = PoseRecordOut {
        version: 1.3,
        people: flat
            .iter()
            .map(|kp| PersonOut {
                person_id: [-1],
                pose_keypoints_2d: kp,
            })
            .collect(),
    };
    serde_json::to_string(&rec).expect("pose record serializes")
}

// serde_json reports 1-based line and column.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(text.len());
        }
        offset += l.len();
    }
    text.len()
}

/// Picks the person with the highest mean confidence over detected joints;
/// ties go to the lowest person index.
pub fn select_athlete(candidates: &[RawFrame]) -> Result<RawFrame> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let score = c.mean_confidence();
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((i, score));
        }
    }
    best.map(|(i, _)| candidates[i].clone())
        .ok_or(Error::NoSkeleton)
}

/// Reads every `*.json` record in `dir` (lexicographic order) into a
/// sequence of athlete frames. Records without people are counted and skipped.
pub fn load_pose_dir(dir: &Path, sample_id: &str) -> Result<(SkeletonSequence, FilterReport)> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut report = FilterReport {
        frames_in: paths.len(),
        ..FilterReport::default()
    };
    let mut frames = Vec::new();
    for (index, path) in paths.iter().enumerate() {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let people = parse_openpose_frame(&text, index).map_err(|e| match e {
            Error::Parse { offset, message } => Error::format(path, format!("byte {offset}: {message}")),
            Error::Schema(message) => Error::format(path, message),
            other => other,
        })?;
        if people.len() > 1 {
            report.multi_person += 1;
        }
        match select_athlete(&people) {
            Ok(frame) => frames.push(frame),
            Err(Error::NoSkeleton) => report.no_skeleton += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((SkeletonSequence::new(sample_id, frames), report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(people: &[Vec<f64>]) -> String {
        let people: Vec<String> = people
            .iter()
            .map(|kp| {
                let vals: Vec<String> = kp.iter().map(|v| v.to_string()).collect();
                format!(r#"{{"person_id":[-1],"pose_keypoints_2d":[{}]}}"#, vals.join(","))
            })
            .collect();
        format!(r#"{{"version":1.3,"people":[{}]}}"#, people.join(","))
    }

    #[test]
    fn decodes_one_person() {
        let kp: Vec<f64> = (0..75).map(|i| i as f64 * 0.5).collect();
        let frames = parse_openpose_frame(&record(std::slice::from_ref(&kp)), 7).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].frame_index, 7);
        for j in 0..NUM_JOINTS {
            let joint = frames[0].joints[j];
            assert_eq!([joint.x, joint.y, joint.confidence], kp[3 * j..3 * j + 3]);
        }
    }

    #[test]
    fn empty_people_is_empty() {
        assert!(parse_openpose_frame(r#"{"people":[]}"#, 0).unwrap().is_empty());
    }

    #[test]
    fn short_keypoint_list_is_schema_error() {
        let kp = vec![1.0; 74];
        let err = parse_openpose_frame(&record(&[kp]), 0).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");
    }

    #[test]
    fn malformed_json_reports_offset() {
        let text = "{\"people\": [\n  {\"pose_keypoints_2d\": [1, 2,, 3]}]}";
        match parse_openpose_frame(text, 0).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(&text[offset..offset + 1], ","),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn missing_people_key_is_schema_error() {
        let err = parse_openpose_frame(r#"{"version":1.3}"#, 0).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    fn with_conf(c: f64) -> RawFrame {
        RawFrame::new([Joint::new(1.0, 1.0, c); NUM_JOINTS], 0)
    }

    #[test]
    fn athlete_selection() {
        assert_eq!(select_athlete(&[with_conf(0.3)]).unwrap(), with_conf(0.3));
        let picked = select_athlete(&[with_conf(0.9), with_conf(0.4)]).unwrap();
        assert_eq!(picked.joints[0].confidence, 0.9);
        let mut second = with_conf(0.7);
        second.joints[0].x = 99.0;
        let picked = select_athlete(&[with_conf(0.7), second]).unwrap();
        assert_eq!(picked.joints[0].x, 1.0);
        assert!(matches!(select_athlete(&[]), Err(Error::NoSkeleton)));
    }

    #[test]
    fn mean_confidence_ignores_undetected() {
        let mut f = with_conf(0.8);
        f.joints[3] = Joint::MISSING;
        assert!((f.mean_confidence() - 0.8).abs() < 1e-15);
    }
}
