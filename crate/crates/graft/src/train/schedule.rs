//! Stage configuration and the learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    One,
    Two,
}

impl StageKind {
    pub fn name(&self) -> &'static str {
        match self {
            StageKind::One => "one",
            StageKind::Two => "two",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Linear warmup, square-root decay, linear cooldown over the last
    /// `cooldown_fraction` of training.
    WarmupSqrtCooldown,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub stage: StageKind,
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub loss_weights: LossWeights,
    pub label_smoothing: f64,
    pub backbone_frozen: bool,
    pub schedule: Schedule,
    pub warmup_steps: usize,
    pub cooldown_fraction: f64,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig::stage_one()
    }
}

impl StageConfig {
    /// Frozen backbone, no center loss, warmup/sqrt-decay/cooldown.
    pub fn stage_one() -> Self {
        StageConfig {
            stage: StageKind::One,
            epochs: 20,
            base_lr: 3e-4,
            weight_decay: 0.01,
            loss_weights: LossWeights {
                alpha: 0.5,
                beta: 0.0,
                gamma: 0.5,
            },
            label_smoothing: 0.0,
            backbone_frozen: true,
            schedule: Schedule::WarmupSqrtCooldown,
            warmup_steps: 10,
            cooldown_fraction: 0.10,
            seed: 0,
        }
    }

    /// Unfrozen backbone, center loss on, constant learning rate with label
    /// smoothing 0.1.
    pub fn stage_two() -> Self {
        StageConfig {
            stage: StageKind::Two,
            epochs: 10,
            base_lr: 5e-6,
            weight_decay: 0.01,
            loss_weights: LossWeights {
                alpha: 0.5,
                beta: 0.0005,
                gamma: 0.5,
            },
            label_smoothing: 0.1,
            backbone_frozen: false,
            schedule: Schedule::Constant,
            warmup_steps: 0,
            cooldown_fraction: 0.10,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        if self.epochs == 0 {
            return Err(Error::config("stage: epochs must be >= 1"));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::config("stage: base_lr must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("stage: weight_decay must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("stage: label_smoothing must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.cooldown_fraction) {
            return Err(Error::config("stage: cooldown_fraction must be in [0, 1)"));
        }
        match self.stage {
            StageKind::One => {
                if !self.backbone_frozen {
                    return Err(Error::config("stage one requires backbone_frozen = true"));
                }
                if self.loss_weights.beta != 0.0 {
                    return Err(Error::config("stage one requires beta = 0 (no center loss)"));
                }
            }
            StageKind::Two => {
                if self.backbone_frozen {
                    return Err(Error::config("stage two requires backbone_frozen = false"));
                }
                if self.schedule != Schedule::Constant {
                    return Err(Error::config("stage two requires the constant schedule"));
                }
            }
        }
        if self.schedule == Schedule::WarmupSqrtCooldown && self.warmup_steps == 0 {
            return Err(Error::config("warmup-sqrt-cooldown schedule needs warmup_steps >= 1"));
        }
        Ok(())
    }
}

/// Learning rate at `step` of `total_steps`.
///
/// Warmup: `base * (step+1) / warmup_steps`; decay:
/// `base * sqrt(warmup_steps / (step+1))`; cooldown: linear from the decay
/// value at the cooldown boundary down to 0 at `total_steps`.
pub fn lr_at_step(step: u64, total_steps: u64, cfg: &StageConfig) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::config(format!(
            "lr_at_step: step {step} out of range for {total_steps} total steps"
        )));
    }
    match cfg.schedule {
        Schedule::Constant => Ok(cfg.base_lr),
        Schedule::WarmupSqrtCooldown => {
            let cooldown_steps = (cfg.cooldown_fraction * total_steps as f64).floor() as u64;
            let cooldown_start = total_steps - cooldown_steps;
            let warmup = cfg.warmup_steps as u64;
            if warmup >= cooldown_start {
                return Err(Error::config(format!(
                    "schedule: warmup_steps {warmup} reaches the cooldown start {cooldown_start}"
                )));
            }
            if step < warmup {
                Ok(cfg.base_lr * (step + 1) as f64 / warmup as f64)
            } else if step < cooldown_start {
                Ok(cfg.base_lr * (warmup as f64 / (step + 1) as f64).sqrt())
            } else {
                let v = cfg.base_lr * (warmup as f64 / (cooldown_start + 1) as f64).sqrt();
                Ok(v * (total_steps - step) as f64 / (total_steps - cooldown_start) as f64)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(warmup: usize) -> StageConfig {
        StageConfig {
            warmup_steps: warmup,
            base_lr: 1.0,
            ..StageConfig::stage_one()
        }
    }

    #[test]
    fn warmup_is_linear() {
        let c = cfg(10);
        assert_eq!(lr_at_step(4, 1000, &c).unwrap(), 0.5);
        assert_eq!(lr_at_step(9, 1000, &c).unwrap(), 1.0);
    }

    #[test]
    fn sqrt_decay_formula() {
        let c = cfg(100);
        let lr = lr_at_step(399, 10_000, &c).unwrap();
        assert!((lr - 0.5).abs() < 1e-15, "{lr}");
    }

    #[test]
    fn boundaries_are_continuous() {
        let c = cfg(10);
        let total = 1000u64;
        // Warmup formula at its last step equals the decay formula there.
        let warm_end = 1.0 * 10.0 / 10.0;
        let decay_at_boundary = (10.0f64 / 10.0).sqrt();
        assert!((warm_end - decay_at_boundary).abs() < 1e-12);
        // Decay at the cooldown start equals the first cooldown value.
        let cooldown_start = total - 100;
        let decay = 1.0 * (10.0f64 / (cooldown_start + 1) as f64).sqrt();
        let cool = lr_at_step(cooldown_start, total, &c).unwrap();
        assert!((decay - cool).abs() < 1e-12, "{decay} vs {cool}");
        // And the schedule hits ~0 at the very end.
        let last = lr_at_step(total - 1, total, &c).unwrap();
        assert!(last > 0.0 && last < decay / 50.0);
    }

    #[test]
    fn constant_returns_base() {
        let c = StageConfig::stage_two();
        assert_eq!(lr_at_step(123, 1000, &c).unwrap(), 5e-6);
    }

    #[test]
    fn warmup_reaching_cooldown_is_rejected() {
        let c = cfg(950);
        assert!(lr_at_step(0, 1000, &c).is_err());
    }

    #[test]
    fn stage_invariants_enforced() {
        let mut one = StageConfig::stage_one();
        one.loss_weights.beta = 0.1;
        assert!(one.validate().is_err());
        let mut one = StageConfig::stage_one();
        one.backbone_frozen = false;
        assert!(one.validate().is_err());
        let mut two = StageConfig::stage_two();
        two.schedule = Schedule::WarmupSqrtCooldown;
        assert!(two.validate().is_err());
        assert!(StageConfig::stage_one().validate().is_ok());
        assert!(StageConfig::stage_two().validate().is_ok());
    }
}
