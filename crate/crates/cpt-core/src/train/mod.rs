//! Training: optimizer, schedule, loss, augmentation, metrics, and the
//! epoch loop with its ablation harness.

pub mod augment;
pub mod metrics;
pub mod optim;
pub mod run;

pub use augment::{augment, random_point_dropout, unit_sphere_normalize};
pub use metrics::{metrics, Metrics};
pub use optim::{cosine_lr, SgdMomentum};
pub use run::{
    cross_entropy, evaluate, run_ablations, train_model, AblationRow, AblationSpec, EpochRecord,
    RunReport, TrainOutcome,
};

use crate::error::{Error, Result};

/// Hyperparameters of one training run. Everything round-trips through
/// `train.*` key-value pairs, mirroring [`crate::model::ModelConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate; the cosine schedule decays it to `lr_min` by the
    /// final epoch.
    pub lr0: f64,
    pub lr_min: f64,
    /// Epochs of linear ramp up to `lr0` before the cosine decay starts.
    /// Post-norm blocks take large early steps badly; a short ramp keeps the
    /// first updates from wrecking the features. 0 disables it.
    pub warmup_epochs: usize,
    pub momentum: f64,
    /// Per-coordinate Gaussian jitter, clamped to `±jitter_clip`.
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
    /// Per-cloud uniform scale range.
    pub scale_lo: f64,
    pub scale_hi: f64,
    /// Fraction of each class that lands in the train split.
    pub train_fraction: f64,
    /// Stop once train accuracy reaches this value.
    pub early_stop_train_acc: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            lr0: 0.01,
            lr_min: 1e-4,
            warmup_epochs: 0,
            momentum: 0.9,
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
            scale_lo: 0.8,
            scale_hi: 1.25,
            train_fraction: 0.8,
            early_stop_train_acc: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr0) {
            return fail(format!("need 0 < lr_min <= lr0, got {} and {}", self.lr_min, self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.jitter_sigma < 0.0 || self.jitter_clip < 0.0 {
            return fail("jitter sigma and clip must be non-negative".into());
        }
        if !(self.scale_lo > 0.0 && self.scale_lo <= self.scale_hi) {
            return fail(format!(
                "need 0 < scale_lo <= scale_hi, got {} and {}",
                self.scale_lo, self.scale_hi
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail(format!("train fraction must be in (0, 1), got {}", self.train_fraction));
        }
        if let Some(acc) = self.early_stop_train_acc {
            if !(acc > 0.0 && acc <= 1.0) {
                return fail(format!("early-stop accuracy must be in (0, 1], got {acc}"));
            }
        }
        if self.warmup_epochs >= self.epochs {
            return fail(format!(
                "warmup ({}) must leave at least one decay epoch of {}",
                self.warmup_epochs, self.epochs
            ));
        }
        Ok(())
    }

    /// Learning rate for `epoch`: a linear ramp through the warmup, then the
    /// cosine decay from `lr0` to `lr_min` over the remaining epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.lr0 * (epoch + 1) as f64 / (self.warmup_epochs + 1) as f64;
        }
        let last = self.epochs - 1;
        cosine_lr(epoch - self.warmup_epochs, last - self.warmup_epochs, self.lr0, self.lr_min)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let kv = [
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr0", self.lr0.to_string()),
            ("lr_min", self.lr_min.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("momentum", self.momentum.to_string()),
            ("jitter_sigma", self.jitter_sigma.to_string()),
            ("jitter_clip", self.jitter_clip.to_string()),
            ("scale_lo", self.scale_lo.to_string()),
            ("scale_hi", self.scale_hi.to_string()),
            ("train_fraction", self.train_fraction.to_string()),
            (
                "early_stop_train_acc",
                self.early_stop_train_acc.map_or("none".to_string(), |v| v.to_string()),
            ),
            ("seed", self.seed.to_string()),
        ];
        kv.into_iter().map(|(k, v)| (format!("train.{k}"), v)).collect()
    }

    /// Applies one `train.*` assignment; `Ok(false)` for foreign keys.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let Some(field) = key.strip_prefix("train.") else {
            return Ok(false);
        };
        let bad = || Error::Config(format!("bad value {value:?} for `{key}`"));
        match field {
            "epochs" => self.epochs = value.parse().map_err(|_| bad())?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad())?,
            "lr0" => self.lr0 = value.parse().map_err(|_| bad())?,
            "lr_min" => self.lr_min = value.parse().map_err(|_| bad())?,
            "warmup_epochs" => self.warmup_epochs = value.parse().map_err(|_| bad())?,
            "momentum" => self.momentum = value.parse().map_err(|_| bad())?,
            "jitter_sigma" => self.jitter_sigma = value.parse().map_err(|_| bad())?,
            "jitter_clip" => self.jitter_clip = value.parse().map_err(|_| bad())?,
            "scale_lo" => self.scale_lo = value.parse().map_err(|_| bad())?,
            "scale_hi" => self.scale_hi = value.parse().map_err(|_| bad())?,
            "train_fraction" => self.train_fraction = value.parse().map_err(|_| bad())?,
            "early_stop_train_acc" => {
                self.early_stop_train_acc =
                    if value == "none" { None } else { Some(value.parse().map_err(|_| bad())?) }
            }
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            _ => return Err(Error::Config(format!("unknown train config key `{key}`"))),
        }
        Ok(true)
    }
}
