use serde::{Deserialize, Serialize};

use super::ParamBlocks;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias correction. Moment buffers are
/// allocated on the first step to match the parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    /// Learning-rate multipliers keyed by a block-name fragment; first match wins.
    multipliers: Vec<(String, f64)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
            multipliers: Vec::new(),
        }
    }

    pub fn with_multiplier(mut self, fragment: impl Into<String>, factor: f64) -> Self {
        self.multipliers.push((fragment.into(), factor));
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn multiplier(&self, name: &str) -> f64 {
        self.multipliers
            .iter()
            .find(|(p, _)| name.contains(p.as_str()))
            .map_or(1.0, |(_, f)| *f)
    }

    /// Applies one update. A non-finite gradient anywhere rejects the whole
    /// update and leaves both the parameters and the optimizer state untouched.
    pub fn step<P: ParamBlocks + ?Sized, G: ParamBlocks + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &G,
    ) -> Result<()> {
        let grad_blocks = grads.blocks();
        for b in &grad_blocks {
            if let Some((index, value)) = b.data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    block: b.name.clone(),
                    index,
                    value: *value,
                });
            }
        }
        let lrs: Vec<f64> = grad_blocks
            .iter()
            .map(|b| self.config.learning_rate * self.multiplier(&b.name))
            .collect();
        let mut param_blocks = params.blocks_mut();
        if param_blocks.len() != grad_blocks.len()
            || param_blocks
                .iter()
                .zip(&grad_blocks)
                .any(|((n, p), g)| p.len() != g.data.len() || n != &g.name)
        {
            return Err(Error::Shape("gradient blocks do not match parameters".into()));
        }
        if self.first.is_empty() {
            self.first = grad_blocks.iter().map(|b| vec![0.0; b.data.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != grad_blocks.len() {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
            ..
        } = self.config;
        let correction1 = 1.0 - beta1.powi(self.step as i32);
        let correction2 = 1.0 - beta2.powi(self.step as i32);
        for (k, ((_, p), g)) in param_blocks.iter_mut().zip(&grad_blocks).enumerate() {
            let lr = lrs[k];
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
