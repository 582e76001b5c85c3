//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: one pair of moment buffers per registered parameter,
/// in the order the parameters are passed to [`Adam::step`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates exactly the listed tensors. Every one must carry a gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::contract(format!(
                    "adam_step: parameter {i} (shape {:?}) has no gradient",
                    p.shape()
                )));
            }
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
                .collect();
        } else if self.moments.len() != params.len()
            || self
                .moments
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.0.len() != p.numel())
        {
            return Err(Error::contract(
                "adam_step: parameter list differs from the one the state was built for",
            ));
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (p, (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            let grad = p.grad().expect("checked above").to_vec();
            for (((w, g), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
