//! AdamW: Adam moments with bias correction plus weight decay applied
//! directly to the weights instead of through the gradient.
//!
//! ```text
//! w ← w − lr·wd·w                      (decoupled decay, decaying params only)
//! m ← β₁m + (1 − β₁)g
//! v ← β₂v + (1 − β₂)g²
//! w ← w − lr · (m / (1 − β₁ᵗ)) / (√(v / (1 − β₂ᵗ)) + ε)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Param;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 3e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    config: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    /// Zeroed moments for parameters of the given lengths.
    pub fn new(config: AdamWConfig, lengths: impl IntoIterator<Item = usize>) -> Result<Self> {
        if config.learning_rate <= 0.0 || !config.learning_rate.is_finite() {
            return Err(Error::contract("learning rate must be positive"));
        }
        let (m, v) = lengths
            .into_iter()
            .map(|n| (vec![T::zero(); n], vec![T::zero(); n]))
            .unzip();
        Ok(AdamW {
            config,
            step: 0,
            m,
            v,
        })
    }

    pub fn for_params(config: AdamWConfig, params: &[Param<T>]) -> Result<Self> {
        Self::new(config, params.iter().map(|p| p.tensor.len()))
    }

    /// Restores saved state; moment lengths must match the parameters.
    pub fn from_state(
        config: AdamWConfig,
        step: u64,
        m: Vec<Vec<T>>,
        v: Vec<Vec<T>>,
    ) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::contract(
                "first and second moments are not congruent",
            ));
        }
        Ok(AdamW { config, step, m, v })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.v
    }

    /// One update over all parameters. Gradients are checked for NaN/Inf
    /// before anything is modified.
    pub fn step(&mut self, params: &mut [Param<T>], grads: &[Vec<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters but got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.tensor.len() != g.len() || g.len() != m.len() {
                return Err(Error::contract(format!(
                    "gradient for {} has the wrong length",
                    p.name
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: p.name.clone(),
                });
            }
        }

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let lr = T::from_f64(c.learning_rate);
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one_minus_b1 = T::from_f64(1.0 - c.beta1);
        let one_minus_b2 = T::from_f64(1.0 - c.beta2);
        let bias1 = T::from_f64(1.0 - c.beta1.powi(t));
        let bias2 = T::from_f64(1.0 - c.beta2.powi(t));
        let eps = T::from_f64(c.eps);
        let shrink = T::from_f64(1.0 - c.learning_rate * c.weight_decay);

        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let decay = p.decay && c.weight_decay != 0.0;
            for (((w, &gi), mi), vi) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                if decay {
                    *w *= shrink;
                }
                *mi = b1 * *mi + one_minus_b1 * gi;
                *vi = b2 * *vi + one_minus_b2 * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
