use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// 0 gives plain SGD.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Rescale the gradient when its global L2 norm exceeds this value.
    #[serde(default = "default_clip_norm")]
    pub clip_norm: Option<f64>,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_clip_norm() -> Option<f64> {
    Some(5.0)
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.05,
            momentum: default_momentum(),
            clip_norm: default_clip_norm(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!(
                    "clip_norm must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    velocity: Option<Gradients>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            velocity: None,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// `v <- momentum * v + g; p <- p - lr * v`.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &Gradients) {
        let scale = match self.config.clip_norm {
            Some(limit) => {
                let norm = grads.norm();
                if norm > limit {
                    limit / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let velocity = self
            .velocity
            .get_or_insert_with(|| Gradients::zeros_like(params));
        let (lr, mu) = (self.config.learning_rate, self.config.momentum);
        for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let v = velocity.buf_mut(i);
            let g = &grads.buffers()[i];
            for ((p, v), &g) in tensor.data.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + scale * g;
                *p = (*p as f64 - lr * *v) as f32;
            }
        }
    }
}
