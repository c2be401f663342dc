//! Synthetic stand-in corpus. Each sample is a template body moved by a few
//! low-frequency sinusoids under a slowly varying amplitude envelope. The
//! score rewards an even motion energy over time; gender sets the shoulder
//! to hip width ratio.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::skeleton::{write_labels, write_openpose_frame, Gender, Joint, RawFrame, SampleLabel, NUM_CLIPS, NUM_JOINTS};
use crate::tensor::SeededRng;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub clip_len: usize,
    /// Frames per sample; `7·clip_len` when `None`.
    pub frames: Option<usize>,
    /// Gaussian observation noise in body units (torso length 1).
    pub sigma: f64,
    pub seed: u64,
    /// Largest amplitude-envelope depth.
    pub modulation_max: f64,
    /// Normalized energy variance that maps to score 0.
    pub variance_scale: f64,
    /// Half-width of the band around 0.5 from which the gender latent is
    /// never drawn.
    pub gender_margin: f64,
    /// Chance that a joint is reported undetected in a frame.
    pub drop_prob: f64,
}

impl SynthSpec {
    pub fn new(n_samples: usize, clip_len: usize, sigma: f64, seed: u64) -> Self {
        SynthSpec {
            n_samples,
            clip_len,
            frames: None,
            sigma,
            seed,
            modulation_max: 0.9,
            variance_scale: 0.6,
            gender_margin: 0.1,
            drop_prob: 0.0,
        }
    }

    fn frame_count(&self) -> usize {
        self.frames.unwrap_or(NUM_CLIPS * self.clip_len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.frame_count() < 3 {
            return Err(Error::Config("synth needs samples and at least 3 frames".into()));
        }
        if !(self.sigma >= 0.0) || !(0.0..0.5).contains(&self.gender_margin) {
            return Err(Error::Config("sigma must be >= 0 and gender_margin in [0, 0.5)".into()));
        }
        if !(0.0..1.0).contains(&self.modulation_max) || !(self.variance_scale > 0.0) {
            return Err(Error::Config("modulation_max in [0, 1) and variance_scale > 0".into()));
        }
        if !(0.0..=0.2).contains(&self.drop_prob) {
            return Err(Error::Config("drop_prob must be in [0, 0.2]".into()));
        }
        Ok(())
    }
}

/// One generated sample: clean trajectories (`[frame][joint] = (x, y)` in
/// body units), the observed frames, and its label.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub clean: Vec<[(f64, f64); NUM_JOINTS]>,
    pub frames: Vec<RawFrame>,
    pub label: SampleLabel,
}

/// `clamp01(1 − Var(e)/(mean(e)²·scale))` where `e_t` is the mean squared
/// joint displacement between frames `t` and `t+1`. A still body scores 1.
pub fn motion_score(traj: &[[(f64, f64); NUM_JOINTS]], scale: f64) -> f64 {
    let energy: Vec<f64> = traj
        .windows(2)
        .map(|w| {
            (0..NUM_JOINTS)
                .map(|j| {
                    let (dx, dy) = (w[1][j].0 - w[0][j].0, w[1][j].1 - w[0][j].1);
                    dx * dx + dy * dy
                })
                .sum::<f64>()
                / NUM_JOINTS as f64
        })
        .collect();
    let n = energy.len() as f64;
    let mean = energy.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return 1.0;
    }
    let var = energy.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    (1.0 - var / (mean * mean * scale)).clamp(0.0, 1.0)
}

/// Rest pose, y up, MidHip at the origin and the neck one unit above it.
fn template(shoulder: f64, hip: f64) -> [(f64, f64); NUM_JOINTS] {
    [
        (0.0, 1.45),
        (0.0, 1.0),
        (-shoulder, 1.0),
        (-shoulder - 0.1, 0.6),
        (-shoulder - 0.15, 0.2),
        (shoulder, 1.0),
        (shoulder + 0.1, 0.6),
        (shoulder + 0.15, 0.2),
        (0.0, 0.0),
        (-hip, 0.0),
        (-hip, -0.6),
        (-hip, -1.2),
        (hip, 0.0),
        (hip, -0.6),
        (hip, -1.2),
        (-0.05, 1.5),
        (0.05, 1.5),
        (-0.1, 1.45),
        (0.1, 1.45),
        (hip + 0.1, -1.3),
        (hip + 0.15, -1.28),
        (hip - 0.05, -1.27),
        (-hip - 0.1, -1.3),
        (-hip - 0.15, -1.28),
        (-hip + 0.05, -1.27),
    ]
}

const TERMS: usize = 3;

fn generate(spec: &SynthSpec, index: usize) -> SynthSample {
    let mut rng = SeededRng::new(spec.seed).fork(index as u64);
    let frames = spec.frame_count();

    let depth = rng.uniform(0.0, spec.modulation_max);
    let side = rng.uniform(0.0, 0.5 - spec.gender_margin);
    let male = rng.uniform(0.0, 1.0) < 0.5;
    let u2 = if male { 0.5 + spec.gender_margin + side } else { 0.5 - spec.gender_margin - side };
    let shoulder = 0.4 * (1.0 + 0.6 * (u2 - 0.5));
    let hip = 0.2 * (1.0 - 0.6 * (u2 - 0.5));
    let rest = template(shoulder, hip);

    let omega: Vec<f64> = (0..TERMS).map(|_| 2.0 * PI / rng.uniform(10.0, 40.0)).collect();
    let envelope_freq = 2.0 * PI / (frames as f64 * rng.uniform(0.5, 1.0));
    let envelope_phase = rng.uniform(0.0, 2.0 * PI);
    let mut amp = [[[0.0; 2]; TERMS]; NUM_JOINTS];
    let mut phase = [[[0.0; 2]; TERMS]; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        for k in 0..TERMS {
            for a in 0..2 {
                amp[j][k][a] = rng.uniform(0.0, 0.12);
                phase[j][k][a] = rng.uniform(0.0, 2.0 * PI);
            }
        }
    }

    let clean: Vec<[(f64, f64); NUM_JOINTS]> = (0..frames)
        .map(|t| {
            let t = t as f64;
            let envelope = 1.0 + depth * (envelope_freq * t + envelope_phase).sin();
            let mut pose = rest;
            for (j, p) in pose.iter_mut().enumerate() {
                let mut d = [0.0; 2];
                for k in 0..TERMS {
                    for (a, da) in d.iter_mut().enumerate() {
                        *da += amp[j][k][a] * (omega[k] * t + phase[j][k][a]).sin();
                    }
                }
                p.0 += envelope * d[0];
                p.1 += envelope * d[1];
            }
            pose
        })
        .collect();

    let score = motion_score(&clean, spec.variance_scale);
    let mut noise = rng.fork(1);
    let observed = clean
        .iter()
        .enumerate()
        .map(|(t, pose)| {
            let mut joints = [Joint::MISSING; NUM_JOINTS];
            for (j, &(x, y)) in pose.iter().enumerate() {
                let (nx, ny) = (spec.sigma * noise.normal(), spec.sigma * noise.normal());
                let dropped = spec.drop_prob > 0.0 && noise.uniform(0.0, 1.0) < spec.drop_prob;
                if !dropped {
                    joints[j] = Joint::new(128.0 + 40.0 * (x + nx), 128.0 - 40.0 * (y + ny), 0.9);
                }
            }
            RawFrame::new(joints, t)
        })
        .collect();

    SynthSample {
        clean,
        frames: observed,
        label: SampleLabel {
            sample_id: format!("synth_{index:04}"),
            total_score: 10.0 + 6.0 * score,
            gender: if male { Gender::Male } else { Gender::Female },
            difficulty: None,
            event: "synthetic".into(),
            year: 2008 + (index % 14) as i32,
        },
    }
}

/// Writes `<out>/<sample_id>/<sample_id>_<frame>_keypoints.json` for every
/// frame plus `<out>/labels.csv`, and returns the samples.
pub fn synth_corpus(spec: &SynthSpec, out: &Path) -> Result<Vec<SynthSample>> {
    spec.validate()?;
    let samples: Vec<SynthSample> = (0..spec.n_samples).map(|i| generate(spec, i)).collect();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for s in &samples {
        let dir = out.join(&s.label.sample_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (t, f) in s.frames.iter().enumerate() {
            let path = dir.join(format!("{}_{t:012}_keypoints.json", s.label.sample_id));
            fs::write(&path, write_openpose_frame(std::slice::from_ref(f))).map_err(|e| Error::io(&path, e))?;
        }
    }
    let labels: Vec<SampleLabel> = samples.iter().map(|s| s.label.clone()).collect();
    write_labels(&out.join("labels.csv"), &labels)?;
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_velocity_scores_one() {
        let traj: Vec<[(f64, f64); NUM_JOINTS]> = (0..30)
            .map(|t| {
                let mut p = [(0.0, 0.0); NUM_JOINTS];
                for (j, q) in p.iter_mut().enumerate() {
                    *q = (j as f64 + 0.3 * t as f64, -0.1 * t as f64);
                }
                p
            })
            .collect();
        assert_eq!(motion_score(&traj, 0.6), 1.0);
        let still = vec![[(1.0, 2.0); NUM_JOINTS]; 5];
        assert_eq!(motion_score(&still, 0.6), 1.0);
    }

    #[test]
    fn uneven_motion_scores_lower() {
        let traj: Vec<[(f64, f64); NUM_JOINTS]> = (0..30)
            .map(|t| {
                let x = if t < 15 { 0.1 * t as f64 } else { 1.5 + t as f64 };
                [(x, 0.0); NUM_JOINTS]
            })
            .collect();
        assert!(motion_score(&traj, 0.6) < 1.0);
    }

    #[test]
    fn score_is_function_of_clean_motion() {
        let spec = SynthSpec::new(4, 8, 0.05, 3);
        for i in 0..4 {
            let s = generate(&spec, i);
            let expect = 10.0 + 6.0 * motion_score(&s.clean, spec.variance_scale);
            assert_eq!(s.label.total_score, expect);
        }
    }

    #[test]
    fn noiseless_generation_is_reproducible() {
        let spec = SynthSpec::new(3, 8, 0.0, 11);
        for i in 0..3 {
            let (a, b) = (generate(&spec, i), generate(&spec, i));
            assert_eq!(a.frames, b.frames);
            assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn scores_spread() {
        let spec = SynthSpec::new(64, 16, 0.0, 5);
        let scores: Vec<f64> = (0..64).map(|i| (generate(&spec, i).label.total_score - 10.0) / 6.0).collect();
        let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo > 0.5, "scores span only [{lo}, {hi}]");
    }
}
