//! AdamW with decoupled weight decay and linear warmup.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ParamRegistry;

fn default_lr() -> f64 {
    3e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.98
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_warmup() -> u64 {
    800
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Steps of linear ramp from 0 to `lr`; constant afterwards.
    #[serde(default = "default_warmup")]
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
            warmup_steps: default_warmup(),
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("eps must be positive, weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// Optimizer state: first/second moment accumulators per parameter, in
/// registry order.
#[derive(Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamRegistry) -> Result<Self> {
        cfg.validate()?;
        let m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Ok(AdamW {
            cfg,
            step: 0,
            m,
            v,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate in effect for update number `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.cfg.warmup_steps > 0 && step < self.cfg.warmup_steps {
            self.cfg.lr * (step + 1) as f64 / self.cfg.warmup_steps as f64
        } else {
            self.cfg.lr
        }
    }

    /// Applies one update from the gradients currently stored on the
    /// registry's tensors (missing gradients count as zero). Returns the
    /// learning rate used. Gradients are left untouched; the caller
    /// clears them.
    pub fn apply(&mut self, params: &ParamRegistry) -> Result<f64> {
        if params.len() != self.m.len() {
            return Err(Error::Parameter(format!(
                "optimizer built for {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        let lr = self.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.cfg.beta1.powi(t);
        let bias2 = 1.0 - self.cfg.beta2.powi(t);
        for (i, (name, tensor)) in params.iter().enumerate() {
            let grad = tensor.grad();
            let mut data = tensor.data_mut();
            if data.len() != self.m[i].len() {
                return Err(Error::Parameter(format!(
                    "parameter {name} changed size under the optimizer"
                )));
            }
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * g;
                *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                data[j] -= lr * (m_hat / (v_hat.sqrt() + self.cfg.eps)
                    + self.cfg.weight_decay * data[j]);
            }
        }
        Ok(lr)
    }
}
