use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::skeleton::{
    build_adjacency, clean_sequence, load_pose_dir, read_labels, write_labels, write_sequence, FilterReport,
};

/// One line of the preprocessing report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PreprocessRow {
    pub sample_id: String,
    /// `ok`, or the reason the sample was skipped.
    pub status: String,
    pub frames_in: usize,
    pub no_skeleton: usize,
    pub multi_person: usize,
    pub kept: usize,
    pub interpolated: usize,
    pub discarded: usize,
}

impl PreprocessRow {
    fn new(sample_id: &str, status: String, r: &FilterReport) -> Self {
        PreprocessRow {
            sample_id: sample_id.to_string(),
            status,
            frames_in: r.frames_in,
            no_skeleton: r.no_skeleton,
            multi_person: r.multi_person,
            kept: r.kept,
            interpolated: r.interpolated,
            discarded: r.discarded,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Cleans every sample directory under `input` into `<out>/<id>.seq`, and
/// writes `<out>/labels.csv` (labels of written samples) and
/// `<out>/report.csv`. Samples are processed in parallel; the report keeps
/// directory-name order.
pub fn preprocess_corpus(input: &Path, labels: &Path, out: &Path) -> Result<Vec<PreprocessRow>> {
    let all_labels = read_labels(labels)?;
    let mut dirs: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(input).map_err(|e| Error::io(input, e))? {
        let entry = entry.map_err(|e| Error::io(input, e))?;
        let path = entry.path();
        if path.is_dir() {
            dirs.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    dirs.sort();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let adjacency = build_adjacency();

    let rows: Vec<Result<PreprocessRow>> = dirs
        .par_iter()
        .map(|(id, dir)| {
            let (seq, ingest) = load_pose_dir(dir, id)?;
            match clean_sequence(&seq, &adjacency, &ingest) {
                Ok((clean, report)) => {
                    write_sequence(&out.join(format!("{id}.seq")), &clean)?;
                    Ok(PreprocessRow::new(id, "ok".into(), &report))
                }
                Err(Error::EmptySequence(report)) => {
                    let why = if report.no_skeleton == report.frames_in {
                        "no skeleton in any frame"
                    } else {
                        "every frame discarded"
                    };
                    Ok(PreprocessRow::new(id, format!("skipped: {why}"), &report))
                }
                Err(e @ (Error::DegeneratePose(_) | Error::DegenerateSequence(_))) => {
                    Ok(PreprocessRow::new(id, format!("skipped: {e}"), &ingest))
                }
                Err(e) => Err(e),
            }
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;

    let kept: Vec<_> = all_labels
        .into_iter()
        .filter(|l| rows.iter().any(|r| r.is_ok() && r.sample_id == l.sample_id))
        .collect();
    write_labels(&out.join("labels.csv"), &kept)?;

    let report = out.join("report.csv");
    let mut w = csv::Writer::from_path(&report).map_err(|e| Error::format(&report, e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::format(&report, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&report, e))?;
    Ok(rows)
}
