use super::TrainingConfig;
use crate::error::{Error, Result};
use crate::numerics::ParamSet;

/// Linear warmup to `peak_lr` over `warmup_steps`, then linear decay to zero
/// at `steps`. `step` is 1-based.
pub fn lr_schedule(step: usize, cfg: &TrainingConfig) -> f64 {
    if step <= cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let remaining = cfg.steps.saturating_sub(step) as f64;
    cfg.peak_lr * remaining / (cfg.steps - cfg.warmup_steps) as f64
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub(crate) m: Vec<Vec<f32>>,
    pub(crate) v: Vec<Vec<f32>>,
    pub(crate) t: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, _, p)| vec![0.0; p.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn update(&mut self, params: &mut ParamSet<f32>, grads: &[Vec<f32>], lr: f64, cfg: &TrainingConfig) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::dim("AdamW::update", self.m.len(), grads.len()));
        }
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let decay = (1.0 - lr * cfg.weight_decay) as f32;
        let (b1f, b2f) = (b1 as f32, b2 as f32);
        let step = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = cfg.adam_eps as f32;
        for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1f * *m + (1.0 - b1f) * g;
                *v = b2f * *v + (1.0 - b2f) * g * g;
                *w = *w * decay - step * *m / (v.sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of weights.
pub struct Ema;

impl Ema {
    /// `ema ← decay·ema + (1 − decay)·params`.
    pub fn update(ema: &mut ParamSet<f32>, params: &ParamSet<f32>, decay: f64) {
        let d = decay as f32;
        for (e, (_, _, p)) in ema.tensors_mut().zip(params.iter()) {
            for (e, &w) in e.data_mut().iter_mut().zip(p.data()) {
                *e = d * *e + (1.0 - d) * w;
            }
        }
    }
}
