use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, NumericsError, ParamStore, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Adam with decoupled weight decay.
///
/// Moments are created lazily the first time a parameter receives a
/// gradient. Parameters absent from the gradient map are left untouched.
#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar = f64> {
    pub config: AdamWConfig,
    step: u64,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.first.get(name)
    }

    /// Applies one update with learning rate `lr`.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &Gradients<T>,
        lr: f64,
    ) -> Result<(), NumericsError> {
        for (name, g) in grads.iter() {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adamw",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(NumericsError::NonFiniteGradient { name: name.clone() });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let lr_t = T::of(lr);
        let wd = T::of(c.weight_decay);
        let eps = T::of(c.eps);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w - lr_t * wd * *w - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
