use serde::{Deserialize, Serialize};

use super::Parameter;
use crate::error::{Error, Result};

/// Plain minibatch SGD with step-decay learning rate and L2 weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub decay_every_iters: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_iters: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            initial_lr: 0.01,
            decay_factor: 0.1,
            decay_every_iters: 5000,
            weight_decay: 0.00001,
            batch_size: 32,
            total_iters: 20000,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) {
            return Err(Error::Config(format!("initial_lr must be > 0, got {}", self.initial_lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.decay_every_iters == 0 || self.batch_size == 0 {
            return Err(Error::Config("decay_every_iters and batch_size must be positive".into()));
        }
        Ok(())
    }

    /// `initial_lr * decay_factor^floor(iter / decay_every_iters)`, applied as
    /// one multiplication per decay step so 0.01 decays to exactly 0.001.
    pub fn learning_rate(&self, iter: usize) -> f64 {
        let mut lr = self.initial_lr;
        for _ in 0..iter / self.decay_every_iters {
            lr *= self.decay_factor;
        }
        lr
    }
}

/// `value <- value - lr(iter) * (grad + weight_decay * value)`
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Parameter>, config: &SgdConfig, iter: usize) {
    let lr = config.learning_rate(iter);
    let wd = config.weight_decay;
    for p in params {
        let grad = p.grad.data();
        for (v, g) in p.value.data_mut().iter_mut().zip(grad) {
            *v -= lr * (g + wd * *v);
        }
    }
}
