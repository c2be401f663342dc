use super::{
    AdjacencyGraph, FilterReport, FrameStatus, Joint, RawFrame, SkeletonSequence, MID_HIP, NECK,
    NUM_JOINTS,
};
use crate::error::{Error, Result};

/// Frames with fewer detected joints than this are dropped.
pub const MIN_VALID_JOINTS: usize = 20;
pub const MAX_MISSING_JOINTS: usize = NUM_JOINTS - MIN_VALID_JOINTS;
/// Confidence written into repaired joints so they stay distinguishable.
pub const INTERPOLATED_CONFIDENCE: f64 = 0.5;

/// Drops frames with fewer than 20 detected joints and flags the rest for
/// repair when anything is missing.
pub fn filter_frames(seq: &SkeletonSequence) -> Result<(SkeletonSequence, FilterReport)> {
    let mut frames = Vec::with_capacity(seq.len());
    let mut status = Vec::with_capacity(seq.len());
    let mut report = FilterReport {
        frames_in: seq.len(),
        ..FilterReport::default()
    };
    for (frame, &prev) in seq.frames.iter().zip(&seq.status) {
        let valid = frame.valid_count();
        if valid < MIN_VALID_JOINTS {
            report.discarded += 1;
            continue;
        }
        let st = match (valid, prev) {
            (NUM_JOINTS, FrameStatus::Repaired) => FrameStatus::Repaired,
            (NUM_JOINTS, _) => FrameStatus::Complete,
            _ => FrameStatus::NeedsRepair,
        };
        if st != FrameStatus::Complete {
            report.interpolated += 1;
        }
        report.kept += 1;
        frames.push(frame.clone());
        status.push(st);
    }
    if frames.is_empty() {
        return Err(Error::EmptySequence(report));
    }
    Ok((
        SkeletonSequence {
            sample_id: seq.sample_id.clone(),
            frames,
            status,
        },
        report,
    ))
}

/// Fills each missing joint with the mean of the two nearest detected joints,
/// nearest meaning fewest hops on the joint graph with ties broken by joint
/// index. Only joints detected in the input frame are used as sources.
pub fn interpolate_missing(frame: &RawFrame, graph: &AdjacencyGraph) -> Result<RawFrame> {
    let missing: Vec<usize> = frame.missing().collect();
    if missing.is_empty() {
        return Ok(frame.clone());
    }
    if missing.len() > MAX_MISSING_JOINTS {
        return Err(Error::Contract(format!(
            "{} joints missing, at most {MAX_MISSING_JOINTS} can be repaired",
            missing.len()
        )));
    }
    let valid: Vec<usize> = (0..NUM_JOINTS)
        .filter(|&j| frame.joints[j].is_valid())
        .collect();
    let mut out = frame.clone();
    for &m in &missing {
        let mut sources: Vec<usize> = valid
            .iter()
            .copied()
            .filter(|&j| graph.hops(m, j) != u32::MAX)
            .collect();
        if sources.len() < 2 {
            return Err(Error::Unrepairable { joint: m });
        }
        sources.sort_by_key(|&j| (graph.hops(m, j), j));
        let (a, b) = (frame.joints[sources[0]], frame.joints[sources[1]]);
        out.joints[m] = Joint::new((a.x + b.x) / 2.0, (a.y + b.y) / 2.0, INTERPOLATED_CONFIDENCE);
    }
    Ok(out)
}

/// Repairs every flagged frame; frames that cannot be repaired are dropped
/// and counted as discarded.
pub fn repair_sequence(
    seq: &SkeletonSequence,
    graph: &AdjacencyGraph,
    report: &mut FilterReport,
) -> Result<SkeletonSequence> {
    let mut frames = Vec::with_capacity(seq.len());
    let mut status = Vec::with_capacity(seq.len());
    for (frame, &st) in seq.frames.iter().zip(&seq.status) {
        if st != FrameStatus::NeedsRepair {
            frames.push(frame.clone());
            status.push(st);
            continue;
        }
        match interpolate_missing(frame, graph) {
            Ok(fixed) => {
                frames.push(fixed);
                status.push(FrameStatus::Repaired);
            }
            Err(Error::Unrepairable { .. }) => {
                report.kept -= 1;
                report.interpolated -= 1;
                report.discarded += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if frames.is_empty() {
        return Err(Error::EmptySequence(report.clone()));
    }
    Ok(SkeletonSequence {
        sample_id: seq.sample_id.clone(),
        frames,
        status,
    })
}

/// Filter, repair and normalize. The returned report merges `ingest`
/// counters (records read, empty records) with the filtering counters.
pub fn clean_sequence(
    seq: &SkeletonSequence,
    graph: &AdjacencyGraph,
    ingest: &FilterReport,
) -> Result<(SkeletonSequence, FilterReport)> {
    let merge = |mut r: FilterReport| {
        r.frames_in = ingest.frames_in.max(r.frames_in);
        r.no_skeleton = ingest.no_skeleton;
        r.multi_person = ingest.multi_person;
        r
    };
    let (filtered, report) = filter_frames(seq).map_err(|e| match e {
        Error::EmptySequence(r) => Error::EmptySequence(merge(r)),
        other => other,
    })?;
    let mut report = merge(report);
    let repaired = repair_sequence(&filtered, graph, &mut report)?;
    let normalized = normalize_sequence(&repaired)?;
    Ok((normalized, report))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Centers every frame on MidHip and divides by the sequence-median
/// Neck–MidHip distance.
pub fn normalize_sequence(seq: &SkeletonSequence) -> Result<SkeletonSequence> {
    if seq.is_empty() {
        return Err(Error::DegenerateSequence("empty sequence".into()));
    }
    let mut torso: Vec<f64> = seq
        .frames
        .iter()
        .map(|f| {
            let (n, h) = (f.joints[NECK], f.joints[MID_HIP]);
            (n.x - h.x).hypot(n.y - h.y)
        })
        .collect();
    let scale = median(&mut torso);
    if !(scale >= 1e-6) {
        return Err(Error::DegeneratePose(scale));
    }
    let frames = seq
        .frames
        .iter()
        .map(|f| {
            let hip = f.joints[MID_HIP];
            let mut out = f.clone();
            for j in out.joints.iter_mut() {
                j.x = (j.x - hip.x) / scale;
                j.y = (j.y - hip.y) / scale;
            }
            out
        })
        .collect();
    Ok(SkeletonSequence {
        sample_id: seq.sample_id.clone(),
        frames,
        status: seq.status.clone(),
    })
}
