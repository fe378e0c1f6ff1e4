//! AdamW with per-group learning rates and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamGroup, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub every_epochs: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub backbone_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
    pub decay: Option<StepDecay>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-4,
            backbone_lr: 1e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 0.1,
            decay: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::validation("optimizer config", m));
        if !(self.lr >= 0.0 && self.backbone_lr >= 0.0 && self.weight_decay >= 0.0 && self.clip_norm >= 0.0) {
            return bad("learning rates, weight decay and clip norm must be non-negative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) || self.eps <= 0.0 {
            return bad("betas must lie in [0, 1) and eps must be positive");
        }
        if let Some(d) = self.decay {
            if d.every_epochs == 0 || !(d.factor > 0.0) {
                return bad("step decay needs every_epochs ≥ 1 and a positive factor");
            }
        }
        Ok(())
    }

    /// Learning-rate multiplier for a zero-based epoch.
    pub fn schedule(&self, epoch: usize) -> f64 {
        match self.decay {
            Some(d) => d.factor.powi((epoch / d.every_epochs) as i32),
            None => 1.0,
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the factor applied (1 when already within bounds).
pub fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if max_norm <= 0.0 || norm <= max_norm {
        return 1.0;
    }
    let scale = max_norm / norm;
    for p in store.iter_mut() {
        p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
    }
    scale
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: OptimizerConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Ok(AdamW { config, step: 0, m: zeros(), v: zeros() })
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Main => self.config.lr,
            ParamGroup::Backbone => self.config.backbone_lr,
        }
    }

    /// One update from the accumulated gradients, with every rate multiplied by `lr_scale`.
    pub fn update(&mut self, store: &mut ParamStore, lr_scale: f64) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::shape("adamw", format!("{} parameters vs {} moment slots", store.len(), self.m.len())));
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if m.shape() != p.value.shape() {
                return Err(Error::shape("adamw", format!("{}: moment {:?} vs value {:?}", p.name, m.shape(), p.value.shape())));
            }
            let lr = lr_scale
                * match p.group {
                    ParamGroup::Main => c.lr,
                    ParamGroup::Backbone => c.backbone_lr,
                };
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * g[i];
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                *x -= lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * *x);
            }
        }
        Ok(())
    }
}
