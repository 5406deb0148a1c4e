use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub ema_decay: f64,
    /// CTC weight in the total loss.
    pub eta: f64,
    /// Probability of dropping every condition.
    pub p_all_drop: f64,
    /// Probability of dropping prompt and speaker together, among items that kept all conditions.
    pub p_joint_drop: f64,
    pub mask_fraction: [f64; 2],
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 16,
            peak_lr: 2e-3,
            warmup_steps: 500,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            ema_decay: 0.999,
            eta: 0.1,
            p_all_drop: 0.2,
            p_joint_drop: 0.3,
            mask_fraction: [0.7, 1.0],
            log_every: 100,
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive".into());
        }
        if self.warmup_steps >= self.steps {
            return bad(format!("warmup_steps {} must be below steps {}", self.warmup_steps, self.steps));
        }
        if !(self.peak_lr > 0.0) || !(self.grad_clip > 0.0) || self.weight_decay < 0.0 {
            return bad("peak_lr and grad_clip must be positive, weight_decay non-negative".into());
        }
        for (name, p) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("ema_decay", self.ema_decay),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1)"));
            }
        }
        for (name, p) in [("p_all_drop", self.p_all_drop), ("p_joint_drop", self.p_joint_drop)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        let [lo, hi] = self.mask_fraction;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return bad(format!("mask_fraction [{lo}, {hi}] must lie in (0, 1]"));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return bad("log_every and checkpoint_every must be positive".into());
        }
        if !(self.adam_eps > 0.0) || self.eta < 0.0 {
            return bad("adam_eps must be positive and eta non-negative".into());
        }
        Ok(())
    }
}
