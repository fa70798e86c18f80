use serde::{Deserialize, Serialize};

use crate::data::AugmentOptions;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};

/// Optimisation and schedule settings. The three ablation toggles here
/// override the ones in the detector configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub milestone_epochs: Vec<usize>,
    pub total_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub use_sfe: bool,
    pub use_dfe: bool,
    pub use_fam: bool,
    /// Hard-negative to positive ratio of the classification loss.
    pub neg_pos_ratio: usize,
    /// Apply [`AugmentOptions`] to training samples.
    pub augment: bool,
    pub augment_options: AugmentOptions,
    /// Run evaluation on the held-out split every this many epochs (and
    /// always after the last one).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    /// Desk-scale schedule: 60 epochs, decays at 40 and 50, two warm-up epochs.
    pub fn toy() -> Self {
        Self {
            base_lr: 0.02,
            batch_size: 16,
            warmup_epochs: 2,
            milestone_epochs: vec![40, 50],
            total_epochs: 60,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            use_sfe: true,
            use_dfe: true,
            use_fam: true,
            neg_pos_ratio: 3,
            augment: true,
            augment_options: AugmentOptions::default(),
            eval_every: 1,
        }
    }

    /// The 300-pixel VOC schedule: 4e-3, five warm-up epochs, decays at 150
    /// and 200, 250 epochs, batch 32.
    pub fn full_scale() -> Self {
        Self {
            base_lr: 4e-3,
            batch_size: 32,
            warmup_epochs: 5,
            milestone_epochs: vec![150, 200],
            total_epochs: 250,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        if self.batch_size == 0 || self.total_epochs == 0 || self.eval_every == 0 {
            return bad("batch_size, total_epochs and eval_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad(format!("momentum {} / weight_decay {} out of range", self.momentum, self.weight_decay));
        }
        if self.milestone_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones {:?} must be strictly increasing", self.milestone_epochs));
        }
        if let Some(&last) = self.milestone_epochs.last() {
            if last >= self.total_epochs {
                return bad(format!("milestone {last} must be below total_epochs {}", self.total_epochs));
            }
        }
        if let Some(&first) = self.milestone_epochs.first() {
            if self.warmup_epochs >= first {
                return bad(format!("warmup_epochs {} must be below the first milestone {first}", self.warmup_epochs));
            }
        } else if self.warmup_epochs > self.total_epochs {
            return bad(format!("warmup_epochs {} exceeds total_epochs", self.warmup_epochs));
        }
        Ok(())
    }

    /// `detector` with this configuration's ablation toggles applied.
    pub fn apply_toggles(&self, detector: &DetectorConfig) -> DetectorConfig {
        detector.clone().with_toggles(self.use_sfe, self.use_dfe, self.use_fam)
    }
}

/// Learning rate at a (fractional) epoch: a linear ramp from `base_lr / 100`
/// to `base_lr` over the warm-up epochs, then `base_lr` divided by 10 for
/// every milestone already reached.
pub fn lr_at(epoch: f64, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_epochs as f64;
    if epoch < warm {
        let start = cfg.base_lr / 100.0;
        return start + (cfg.base_lr - start) * (epoch / warm);
    }
    let passed = cfg.milestone_epochs.iter().filter(|&&m| m as f64 <= epoch).count();
    cfg.base_lr / 10f64.powi(passed as i32)
}
