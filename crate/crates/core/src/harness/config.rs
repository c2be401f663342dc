use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{DistillConfig, DistillMode, VfdConfig};
use crate::error::{Error, Result};
use crate::heads::{AdamConfig, LossWeights};
use crate::jfe::JfeConfig;

/// Everything a run depends on. Read from a TOML document; unknown keys are
/// rejected and `seed` has no default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "d::mode")]
    pub mode: DistillMode,
    /// Frames per clip.
    #[serde(default = "d::clip_len")]
    pub clip_len: usize,
    /// Input, spatial, first temporal and second temporal widths.
    #[serde(default = "d::channels")]
    pub channels: [usize; 4],
    #[serde(default = "d::temporal_kernel")]
    pub temporal_kernel: usize,
    #[serde(default = "d::vfd_kernel")]
    pub vfd_kernel: usize,
    #[serde(default = "d::vfd_stride")]
    pub vfd_stride: usize,
    #[serde(default = "d::vfd_len")]
    pub vfd_len: usize,
    #[serde(default = "d::quantile")]
    pub quantile: f64,
    #[serde(default = "d::mlp_hidden")]
    pub mlp_hidden: [usize; 2],
    #[serde(default = "d::loss_w")]
    pub loss_w: f64,
    #[serde(default = "d::lambda_gender")]
    pub lambda_gender: f64,
    #[serde(default = "d::class_loss")]
    pub class_loss: bool,
    #[serde(default = "d::lr")]
    pub lr: f64,
    #[serde(default = "d::beta1")]
    pub beta1: f64,
    #[serde(default = "d::beta2")]
    pub beta2: f64,
    #[serde(default = "d::eps")]
    pub eps: f64,
    #[serde(default = "d::epochs")]
    pub epochs: usize,
    #[serde(default = "d::batch_size")]
    pub batch_size: usize,
    /// Share of samples held out for validation, chosen by hashing ids.
    #[serde(default = "d::val_fraction")]
    pub val_fraction: f64,
    /// Stop once train Spearman reaches this (and gender accuracy is 1 when
    /// the class loss is on).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_train_spearman: Option<f64>,
    /// Directory of `.seq` files written by `preprocess`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Defaults to `labels.csv` inside `data_dir`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default = "d::out_dir")]
    pub out_dir: PathBuf,
}

mod d {
    use super::*;
    pub fn mode() -> DistillMode {
        DistillMode::DnlaDeltaEmb
    }
    pub fn clip_len() -> usize {
        16
    }
    pub fn channels() -> [usize; 4] {
        JfeConfig::default().channels
    }
    pub fn temporal_kernel() -> usize {
        JfeConfig::default().kernel
    }
    pub fn vfd_kernel() -> usize {
        VfdConfig::default().kernel
    }
    pub fn vfd_stride() -> usize {
        VfdConfig::default().stride
    }
    pub fn vfd_len() -> usize {
        VfdConfig::default().out_len
    }
    pub fn quantile() -> f64 {
        0.25
    }
    pub fn mlp_hidden() -> [usize; 2] {
        [64, 32]
    }
    pub fn loss_w() -> f64 {
        LossWeights::default().w
    }
    pub fn lambda_gender() -> f64 {
        LossWeights::default().lambda_g
    }
    pub fn class_loss() -> bool {
        true
    }
    pub fn lr() -> f64 {
        AdamConfig::default().lr
    }
    pub fn beta1() -> f64 {
        AdamConfig::default().beta1
    }
    pub fn beta2() -> f64 {
        AdamConfig::default().beta2
    }
    pub fn eps() -> f64 {
        AdamConfig::default().eps
    }
    pub fn epochs() -> usize {
        100
    }
    pub fn batch_size() -> usize {
        4
    }
    pub fn val_fraction() -> f64 {
        0.2
    }
    pub fn out_dir() -> PathBuf {
        PathBuf::from("runs")
    }
}

impl RunConfig {
    /// Defaults for everything but the seed.
    pub fn with_seed(seed: u64) -> Self {
        toml::from_str(&format!("seed = {seed}")).expect("defaults parse")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn jfe(&self) -> JfeConfig {
        JfeConfig {
            channels: self.channels,
            kernel: self.temporal_kernel,
        }
    }

    pub fn distill(&self) -> DistillConfig {
        DistillConfig {
            mode: self.mode,
            vfd: VfdConfig {
                kernel: self.vfd_kernel,
                stride: self.vfd_stride,
                out_len: self.vfd_len,
            },
            q: self.quantile,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            w: self.loss_w,
            lambda_g: self.lambda_gender,
            class_loss_enabled: self.class_loss,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn labels_path(&self) -> Option<PathBuf> {
        self.labels
            .clone()
            .or_else(|| self.data_dir.as_ref().map(|d| d.join("labels.csv")))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        self.jfe().validate()?;
        self.distill().vfd.validate()?;
        self.loss_weights().validate()?;
        if self.clip_len < 2 {
            return cfg_err(format!("clip_len must be at least 2, got {}", self.clip_len));
        }
        if self.temporal_kernel > self.clip_len {
            return cfg_err(format!(
                "temporal_kernel {} exceeds clip_len {}",
                self.temporal_kernel, self.clip_len
            ));
        }
        if !(0.0..1.0).contains(&self.quantile) {
            return cfg_err(format!("quantile must be in [0, 1), got {}", self.quantile));
        }
        if self.mlp_hidden.contains(&0) {
            return cfg_err("mlp_hidden widths must be positive".into());
        }
        if self.batch_size == 0 {
            return cfg_err("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return cfg_err(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        if !(self.lr > 0.0 && self.eps > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return cfg_err("optimizer settings out of range".into());
        }
        let positions = self.jfe().out_layout(self.clip_len).positions();
        if positions < self.vfd_kernel {
            return cfg_err(format!(
                "encoder yields {positions} positions, fewer than vfd_kernel {}",
                self.vfd_kernel
            ));
        }
        if matches!(self.mode, DistillMode::DnlaMuEmb | DistillMode::DnlaMuCat)
            && self.jfe().out_frames(self.clip_len) < 2
        {
            return Err(Error::DegenerateSequence(
                "motion branch needs at least 2 encoded frames per clip".into(),
            ));
        }
        Ok(())
    }

    /// Checks that the data paths a training run needs are present.
    pub fn require_data(&self) -> Result<(PathBuf, PathBuf)> {
        let data = self
            .data_dir
            .clone()
            .ok_or_else(|| Error::Config("data_dir is required".into()))?;
        let labels = self.labels_path().expect("data_dir is set");
        for p in [&data, &labels] {
            if !p.exists() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "path does not exist"),
                ));
            }
        }
        Ok((data, labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        assert!(matches!(RunConfig::from_toml("mode = \"vfd\""), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml("seed = 1\nlearning_rate = 0.1").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn unknown_mode_rejected() {
        assert!(matches!(
            RunConfig::from_toml("seed = 1\nmode = \"nla\""),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::with_seed(9);
        cfg.mode = DistillMode::NlaCat;
        cfg.target_train_spearman = Some(0.9);
        cfg.data_dir = Some("data".into());
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn kernel_longer_than_clip() {
        assert!(matches!(
            RunConfig::from_toml("seed = 1\nclip_len = 8"),
            Err(Error::Config(_))
        ));
    }
}
