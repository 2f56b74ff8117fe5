//! SGD with classic momentum, coupled weight decay and a step-decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Step-decay learning-rate schedule with optional linear warmup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base_lr: f64,
    /// The rate is divided by this factor at every decay epoch.
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default)]
    pub decay_epochs: Vec<usize>,
    #[serde(default)]
    pub warmup_epochs: usize,
}

fn default_decay_factor() -> f64 {
    10.0
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            base_lr: lr,
            decay_factor: default_decay_factor(),
            decay_epochs: Vec::new(),
            warmup_epochs: 0,
        }
    }

    /// Learning rate for batch `batch` (0-based) of `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize, batch: usize, batches_per_epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        let lr = self.base_lr / self.decay_factor.powi(decays as i32);
        if epoch < self.warmup_epochs {
            let done = (epoch * batches_per_epoch + batch + 1) as f64;
            let total = (self.warmup_epochs * batches_per_epoch.max(1)) as f64;
            lr * (done / total).min(1.0)
        } else {
            lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config {
                key: "base_lr".into(),
                detail: format!("must be positive, got {}", self.base_lr),
            });
        }
        if self.decay_factor < 1.0 {
            return Err(Error::Config {
                key: "decay_factor".into(),
                detail: format!("must be >= 1, got {}", self.decay_factor),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Optimizer state: one velocity buffer per parameter.
#[derive(Clone, Debug)]
pub struct SgdState<F> {
    pub config: SgdConfig,
    velocity: Vec<Tensor<F>>,
    step_count: u64,
}

impl<F: Element> SgdState<F> {
    pub fn new(config: SgdConfig, params: &[&Tensor<F>]) -> Self {
        SgdState {
            config,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn velocity(&self) -> &[Tensor<F>] {
        &self.velocity
    }

    /// `v ← μ·v + g + λ·w; w ← w − lr·v`. Entries whose mask byte is 0 keep
    /// zero velocity and zero weight. Fails if any updated value is
    /// non-finite.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<F>],
        grads: &[Tensor<F>],
        masks: &[Option<&[u8]>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() || masks.len() != params.len() {
            return Err(Error::shape(
                "sgd_step",
                format!(
                    "{} params, {} grads, {} masks, {} velocity buffers",
                    params.len(),
                    grads.len(),
                    masks.len(),
                    self.velocity.len()
                ),
            ));
        }
        let mu = F::of(self.config.momentum);
        let wd = F::of(self.config.weight_decay);
        let lr = F::of(lr);
        for (i, p) in params.iter_mut().enumerate() {
            let v = &mut self.velocity[i];
            if p.shape() != grads[i].shape() || p.shape() != v.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("param {i}: {:?} vs grad {:?}", p.shape(), grads[i].shape()),
                ));
            }
            let g = grads[i].data();
            let vd = v.data_mut();
            let w = p.data_mut();
            match masks[i] {
                Some(m) => {
                    for j in 0..w.len() {
                        if m[j] == 0 {
                            vd[j] = F::zero();
                            w[j] = F::zero();
                        } else {
                            vd[j] = mu * vd[j] + g[j] + wd * w[j];
                            w[j] -= lr * vd[j];
                        }
                    }
                }
                None => {
                    for j in 0..w.len() {
                        vd[j] = mu * vd[j] + g[j] + wd * w[j];
                        w[j] -= lr * vd[j];
                    }
                }
            }
            if !w.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!("sgd step {} on parameter {i}", self.step_count)));
            }
        }
        self.step_count += 1;
        Ok(())
    }
}
