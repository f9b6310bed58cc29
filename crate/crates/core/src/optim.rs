use serde::{Deserialize, Serialize};

use crate::error::{Result, TcnError};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// One trainable parameter block handed to [`OptimizerState::step`].
pub struct ParamSlot<'a, T> {
    pub name: &'a str,
    pub values: &'a mut [T],
    pub grad: &'a [T],
}

/// Adam moment accumulators for a fixed list of parameter blocks.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    /// `sizes` lists the length of each parameter block, in the order later
    /// passed to [`step`](Self::step).
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Result<Self> {
        if !(config.lr >= 0.0 && config.lr.is_finite()) {
            return Err(TcnError::config(format!(
                "invalid learning rate {}",
                config.lr
            )));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(TcnError::config("Adam betas must lie in [0, 1)"));
        }
        Ok(Self {
            config,
            step: 0,
            first: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update. If any gradient is non-finite
    /// nothing is modified and the offending parameter is named.
    pub fn step(&mut self, slots: &mut [ParamSlot<'_, T>]) -> Result<()> {
        if slots.len() != self.first.len() {
            return Err(TcnError::shape(format!(
                "optimizer tracks {} parameter blocks, got {}",
                self.first.len(),
                slots.len()
            )));
        }
        for (slot, m) in slots.iter().zip(&self.first) {
            if slot.values.len() != m.len() || slot.grad.len() != m.len() {
                return Err(TcnError::shape(format!(
                    "parameter {} has {} values and {} gradients, expected {}",
                    slot.name,
                    slot.values.len(),
                    slot.grad.len(),
                    m.len()
                )));
            }
            if slot.grad.iter().any(|g| !g.is_finite()) {
                return Err(TcnError::NonFiniteGradient {
                    param: slot.name.to_string(),
                });
            }
        }

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one = T::one();
        let correction1 = T::from_f64(1.0 - c.beta1.powi(t));
        let correction2 = T::from_f64(1.0 - c.beta2.powi(t));
        let lr = T::from_f64(c.lr);
        let eps = T::from_f64(c.eps);

        for ((slot, m), v) in slots.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            for (((p, &g), mi), vi) in slot
                .values
                .iter_mut()
                .zip(slot.grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let m_hat = *mi / correction1;
                let v_hat = *vi / correction2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
