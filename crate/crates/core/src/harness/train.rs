use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{adam_step, loss, spearman, AdamState, Prediction};
use crate::skeleton::{build_adjacency, read_labels, read_sequence, segment_clips, AdjacencyGraph, Gender};
use crate::tensor::{Graph, SeededRng, Tensor};

use super::{forward, Checkpoint, ModelParams, RunConfig};

/// A training or evaluation example ready for the model.
#[derive(Clone, Debug)]
pub struct Sample {
    pub sample_id: String,
    /// `[7 × T × 25 × C_in]`
    pub clips: Tensor,
    pub score: f64,
    pub gender: Gender,
}

/// Reads `<data>/<id>.seq` for every label row and cuts it into clips.
pub fn load_corpus(data: &Path, labels: &Path, cfg: &RunConfig) -> Result<Vec<Sample>> {
    read_labels(labels)?
        .into_iter()
        .map(|l| {
            let seq = read_sequence(&data.join(format!("{}.seq", l.sample_id)), &l.sample_id)?;
            let batch = segment_clips(&seq, cfg.clip_len, cfg.channels[0])?;
            Ok(Sample {
                sample_id: l.sample_id,
                clips: batch.clips,
                score: l.total_score,
                gender: l.gender,
            })
        })
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Deterministic hold-out membership by hash of the sample id.
pub fn is_validation(sample_id: &str, val_fraction: f64) -> bool {
    (fnv1a(sample_id.as_bytes()) % 10_000) as f64 / 10_000.0 < val_fraction
}

pub fn predict(
    sample: &Sample,
    params: &ModelParams,
    adjacency: &AdjacencyGraph,
    cfg: &RunConfig,
) -> Result<Prediction> {
    let mut g = Graph::new();
    let pv = params.map(&mut |_, t| g.constant(t.clone()));
    let x = g.constant(sample.clips.clone());
    let (s, l) = forward(&mut g, x, adjacency, &pv, cfg)?;
    let s = g.value(s).data()[0];
    let l = g.value(l).data();
    if !s.is_finite() || !l.iter().all(|v| v.is_finite()) {
        let (node, op) = g.first_non_finite().expect("non-finite output has a source");
        return Err(Error::NonFinite { node, op: op.name() });
    }
    Ok(Prediction {
        score_norm: s,
        gender_logits: [l[0], l[1]],
    })
}

/// Evaluation record with a fixed key set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub n_samples: usize,
    pub spearman: f64,
    /// On the original score scale.
    pub mae: f64,
    pub gender_accuracy: f64,
}

fn denormalize(s: f64, range: (f64, f64)) -> f64 {
    range.0 + s * (range.1 - range.0)
}

fn normalize(s: f64, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        (s - range.0) / (range.1 - range.0)
    } else {
        0.5
    }
}

fn predictions(
    samples: &[Sample],
    params: &ModelParams,
    adjacency: &AdjacencyGraph,
    cfg: &RunConfig,
    parallel: bool,
) -> Result<Vec<Prediction>> {
    if parallel {
        samples
            .par_iter()
            .map(|s| predict(s, params, adjacency, cfg))
            .collect()
    } else {
        samples.iter().map(|s| predict(s, params, adjacency, cfg)).collect()
    }
}

fn gender_accuracy(samples: &[Sample], preds: &[Prediction]) -> f64 {
    let right = samples
        .iter()
        .zip(preds)
        .filter(|(s, p)| p.gender() == s.gender)
        .count();
    right as f64 / samples.len() as f64
}

/// Scores a checkpoint on a corpus. Errors with an undefined correlation when
/// predictions or targets have no rank variance.
pub fn evaluate(ckpt: &Checkpoint, samples: &[Sample]) -> Result<EvalRecord> {
    let cfg = &ckpt.config;
    let adjacency = build_adjacency();
    let preds = predictions(samples, &ckpt.params, &adjacency, cfg, true)?;
    let range = (ckpt.score_min, ckpt.score_max);
    let scores: Vec<f64> = preds.iter().map(|p| denormalize(p.score_norm, range)).collect();
    let targets: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let rho = spearman(&scores, &targets)?;
    let mae = scores.iter().zip(&targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / samples.len() as f64;
    Ok(EvalRecord {
        n_samples: samples.len(),
        spearman: rho,
        mae,
        gender_accuracy: gender_accuracy(samples, &preds),
    })
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_spearman,val_spearman,gender_accuracy";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_spearman: f64,
    pub val_spearman: f64,
    /// On the training split.
    pub gender_accuracy: f64,
}

impl EpochMetrics {
    fn row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.train_loss, self.train_spearman, self.val_spearman, self.gender_accuracy
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    /// Best checkpoint by validation Spearman (train Spearman when there is
    /// no usable validation split).
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

fn spearman_or_nan(preds: &[Prediction], samples: &[Sample]) -> f64 {
    let p: Vec<f64> = preds.iter().map(|p| p.score_norm).collect();
    let t: Vec<f64> = samples.iter().map(|s| s.score).collect();
    spearman(&p, &t).unwrap_or(f64::NAN)
}

/// Trains on `samples`, writing `metrics.csv` (one row per epoch, appended as
/// it goes) and `checkpoint.bin` to `cfg.out_dir`.
pub fn train(cfg: &RunConfig, samples: &[Sample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (val, train): (Vec<Sample>, Vec<Sample>) = samples
        .iter()
        .cloned()
        .partition(|s| is_validation(&s.sample_id, cfg.val_fraction));
    if train.is_empty() {
        return Err(Error::Config("no training samples after the split".into()));
    }
    let range = train.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
        (lo.min(s.score), hi.max(s.score))
    });

    let root = SeededRng::new(cfg.seed);
    let mut params = ModelParams::init(cfg, &mut root.fork(0));
    let mut order_rng = root.fork(1);
    let shapes: Vec<Vec<usize>> = params.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let mut adam = AdamState::new(&shapes.iter().map(|s| s.as_slice()).collect::<Vec<_>>());
    let adjacency = build_adjacency();
    let lw = cfg.loss_weights();
    let opt = cfg.adam();

    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    let checkpoint_path = cfg.out_dir.join("checkpoint.bin");
    let mut log = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(log, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;

    let snapshot = |params: &ModelParams, adam: &AdamState, epoch: usize| Checkpoint {
        config: cfg.clone(),
        epoch: epoch as u64,
        score_min: range.0,
        score_max: range.1,
        params: params.clone(),
        adam: adam.clone(),
    };
    let mut best = snapshot(&params, &adam, 0);
    let mut best_metric = f64::NEG_INFINITY;
    let mut metrics = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let pv = params.map(&mut |_, t| g.param(t.clone()));
            let mut total = None;
            for &i in chunk {
                let s = &train[i];
                let x = g.constant(s.clips.clone());
                let (score, logits) = forward(&mut g, x, &adjacency, &pv, cfg)?;
                let l = loss(&mut g, score, logits, normalize(s.score, range), s.gender, &lw)?;
                total = Some(match total {
                    None => l,
                    Some(acc) => g.add(acc, l)?,
                });
            }
            let batch_loss = g.scale(total.expect("non-empty batch"), 1.0 / chunk.len() as f64);
            let value = g.value(batch_loss).data()[0];
            if !value.is_finite() {
                let (node, op) = g.first_non_finite().expect("non-finite loss has a source");
                return Err(Error::NonFinite { node, op: op.name() });
            }
            let grads = g.backward(batch_loss)?;
            let grad_list: Vec<Tensor> = pv.named().into_iter().map(|(_, v)| grads.get_or_zeros(&g, v)).collect();
            let mut targets: Vec<&mut Tensor> = params.named_mut().into_iter().map(|(_, t)| t).collect();
            adam_step(&mut targets, &grad_list.iter().collect::<Vec<_>>(), &mut adam, &opt)?;
            loss_sum += value;
            batches += 1;
        }

        let train_preds = predictions(&train, &params, &adjacency, cfg, false)?;
        let train_spearman = spearman_or_nan(&train_preds, &train);
        let val_spearman = if val.len() >= 2 {
            spearman_or_nan(&predictions(&val, &params, &adjacency, cfg, false)?, &val)
        } else {
            f64::NAN
        };
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / batches as f64,
            train_spearman,
            val_spearman,
            gender_accuracy: gender_accuracy(&train, &train_preds),
        };
        writeln!(log, "{}", m.row()).map_err(|e| Error::io(&metrics_path, e))?;
        metrics.push(m);

        let selector = if val_spearman.is_nan() { train_spearman } else { val_spearman };
        if selector > best_metric {
            best_metric = selector;
            best = snapshot(&params, &adam, epoch);
        }
        if let Some(target) = cfg.target_train_spearman {
            if train_spearman >= target && (!cfg.class_loss || m.gender_accuracy == 1.0) {
                break;
            }
        }
    }
    if best_metric == f64::NEG_INFINITY && cfg.epochs > 0 {
        // no epoch produced a defined correlation; keep the final state
        best = snapshot(&params, &adam, metrics.len());
    }
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;
    best.save(&checkpoint_path)?;
    Ok(TrainOutcome {
        metrics,
        checkpoint: best,
        checkpoint_path,
        metrics_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_stable_and_roughly_proportional() {
        let ids: Vec<String> = (0..1000).map(|i| format!("s{i}")).collect();
        let held = ids.iter().filter(|id| is_validation(id, 0.2)).count();
        assert!((150..250).contains(&held), "{held}");
        assert!(ids.iter().all(|id| is_validation(id, 0.2) == is_validation(id, 0.2)));
        assert!(ids.iter().all(|id| !is_validation(id, 0.0)));
    }

    #[test]
    fn normalization_round_trip() {
        let r = (12.0, 16.0);
        assert_eq!(normalize(12.0, r), 0.0);
        assert_eq!(normalize(16.0, r), 1.0);
        assert_eq!(denormalize(normalize(13.0, r), r), 13.0);
    }
}
