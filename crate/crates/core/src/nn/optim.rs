use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Learning rate at the last step as a fraction of `learning_rate`;
    /// the rate decays linearly in between. 1 keeps it constant.
    pub final_lr_fraction: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            final_lr_fraction: 1.0,
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate for step `step` of `total` under the linear decay.
    pub fn scheduled_rate(config: &AdamConfig, step: usize, total: usize) -> f64 {
        let frac = if total > 1 { step as f64 / (total - 1) as f64 } else { 0.0 };
        config.learning_rate * (1.0 - (1.0 - config.final_lr_fraction) * frac)
    }

    /// Apply one update from the accumulated gradients, then zero them.
    ///
    /// Any non-finite gradient aborts the whole step before a single value
    /// changes. A parameter without a gradient buffer counts as zero gradient.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        for p in params.iter() {
            if let Some(g) = p.tensor.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len() || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.tensor.len()) {
            return Err(Error::InvalidArgument("parameter set changed between optimizer steps".into()));
        }

        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
            ..
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);

        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let (values, grad) = p.tensor.values_and_grad_mut();
            for i in 0..values.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                if lr != 0.0 {
                    values[i] -= lr * mh / (vh.sqrt() + eps);
                }
                grad[i] = 0.0;
            }
        }
        Ok(())
    }
}
