//! Decoupled-weight-decay adaptive-moment optimizer with parameter groups,
//! global gradient-norm clipping, and a warmup-then-cosine learning-rate
//! schedule. Gradients arrive as a name-keyed map so callers can accumulate
//! across micro-batches before stepping.

use std::collections::HashMap;

use candle_core::{backprop::GradStore, DType, Tensor, Var};

use crate::error::{Result, X2Error};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip threshold.
    pub max_norm: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            max_norm: 1.0,
            warmup_ratio: 0.03,
            total_steps: 1000,
        }
    }
}

/// Named parameters stepping at `lr_scale` times the base rate.
pub struct ParamGroup {
    pub name: String,
    pub vars: Vec<(String, Var)>,
    pub lr_scale: f64,
}

pub struct AdamW {
    pub cfg: OptimConfig,
    groups: Vec<ParamGroup>,
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
    step: usize,
}

/// Accumulated gradients keyed by parameter name.
pub type GradMap = HashMap<String, Tensor>;

/// Fold one backward pass into an accumulator with the given scale.
pub fn accumulate_grads(
    acc: &mut GradMap,
    grads: &GradStore,
    groups: &[ParamGroup],
    scale: f64,
) -> Result<()> {
    for g in groups {
        for (name, var) in &g.vars {
            if let Some(grad) = grads.get(var.as_tensor()) {
                // detach so the accumulator does not keep the whole forward
                // and backward graph of every micro-batch alive
                let scaled = (grad * scale)?.detach();
                match acc.get_mut(name) {
                    Some(t) => *t = (&*t + scaled)?,
                    None => {
                        acc.insert(name.clone(), scaled);
                    }
                }
            }
        }
    }
    Ok(())
}

impl AdamW {
    pub fn new(cfg: OptimConfig, groups: Vec<ParamGroup>) -> Self {
        Self { cfg, groups, m: HashMap::new(), v: HashMap::new(), step: 0 }
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    /// Linear warmup to the base rate, then cosine decay to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        let total = self.cfg.total_steps.max(1) as f64;
        let warm = (self.cfg.warmup_ratio * total).ceil().max(1.0);
        let s = step as f64;
        if s < warm {
            self.cfg.lr * (s + 1.0) / warm
        } else {
            let p = ((s - warm) / (total - warm).max(1.0)).min(1.0);
            self.cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
        }
    }

    /// Global L2 norm over all accumulated gradients.
    pub fn grad_norm(grads: &GradMap) -> Result<f64> {
        let mut total = 0f64;
        for g in grads.values() {
            total += g
                .sqr()?
                .sum_all()?
                .to_dtype(DType::F64)?
                .to_scalar::<f64>()?;
        }
        Ok(total.sqrt())
    }

    /// Apply one update from accumulated gradients. Returns the (clipped)
    /// gradient norm; NaN gradients surface as a numeric error.
    pub fn step(&mut self, grads: &GradMap) -> Result<f64> {
        let norm = Self::grad_norm(grads)?;
        if !norm.is_finite() {
            return Err(X2Error::Numeric(format!("non-finite gradient norm {norm}")));
        }
        let clip = if norm > self.cfg.max_norm && norm > 0.0 {
            self.cfg.max_norm / norm
        } else {
            1.0
        };
        let lr = self.lr_at(self.step);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for group in &self.groups {
            let glr = lr * group.lr_scale;
            for (name, var) in &group.vars {
                let Some(grad) = grads.get(name) else { continue };
                let grad = (grad * clip)?;
                let m = match self.m.get(name) {
                    Some(m) => ((m * self.cfg.beta1)? + (&grad * (1.0 - self.cfg.beta1))?)?,
                    None => (&grad * (1.0 - self.cfg.beta1))?,
                };
                let v = match self.v.get(name) {
                    Some(v) => ((v * self.cfg.beta2)? + (grad.sqr()? * (1.0 - self.cfg.beta2))?)?,
                    None => (grad.sqr()? * (1.0 - self.cfg.beta2))?,
                };
                let m_hat = (&m / bc1)?;
                let v_hat = (&v / bc2)?;
                let update = (m_hat / (v_hat.sqrt()? + self.cfg.eps)?)?;
                let p = var.as_tensor();
                let decayed = (p * (1.0 - glr * self.cfg.weight_decay))?;
                var.set(&(decayed - (update * glr)?)?)?;
                self.m.insert(name.clone(), m);
                self.v.insert(name.clone(), v);
            }
        }
        self.step += 1;
        Ok(norm.min(self.cfg.max_norm))
    }
}
