use super::params::Parameters;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear ramp length, then cosine decay to `min_lr_ratio * lr`.
    pub warmup_steps: usize,
    pub min_lr_ratio: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            warmup_steps: 100,
            min_lr_ratio: 0.1,
            steps: 2000,
            batch_size: 4,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be finite and nonnegative", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
    }
}

/// Adam moments over a flat view of any [`Parameters`].
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(params: &dyn Parameters) -> Self {
        let mut n = 0;
        params.for_each(&mut |t| n += t.len());
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut dyn Parameters, grads: &dyn Parameters, lr: f64, cfg: &OptimizerConfig) {
        let mut g = Vec::with_capacity(self.m.len());
        grads.for_each(&mut |t| g.extend_from_slice(t));
        if cfg.clip_norm > 0.0 {
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > cfg.clip_norm {
                let s = cfg.clip_norm / norm;
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for ((m, v), &g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(&g) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        }
        if lr == 0.0 {
            return;
        }
        let mut k = 0;
        let (m, v) = (&self.m, &self.v);
        params.for_each_mut(&mut |t| {
            for p in t.iter_mut() {
                *p -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.eps);
                k += 1;
            }
        });
    }
}
