use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Scalar};
use crate::error::{contract_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// AdamW with decoupled weight decay:
///
/// ```text
/// p ← p·(1 − lr·wd)
/// m ← β1·m + (1 − β1)·g        v ← β2·v + (1 − β2)·g²
/// p ← p − lr · (m / (1 − β1ᵗ)) / (√(v / (1 − β2ᵗ)) + ε)
/// ```
///
/// Only trainable parameters are touched. Moment buffers are created on the
/// first step a parameter is seen and always match its shape.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn has_state(&self, id: ParamId) -> bool {
        self.moments.contains_key(&id)
    }

    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
            return contract_err(format!("parameter `{}` has no gradient", p.name));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (lr, b1, b2, eps) =
            (T::from_f64_lossy(c.lr), T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2), T::from_f64_lossy(c.eps));
        let decay = T::from_f64_lossy(1.0 - c.lr * c.weight_decay);
        let (bc1, bc2) = (T::from_f64_lossy(bc1), T::from_f64_lossy(bc2));
        let one = T::one();

        for (id, p) in store.iter_mut().filter(|(_, p)| p.trainable) {
            let grad = p.grad.as_ref().expect("checked above");
            let n = p.value.numel();
            let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            for (((w, &g), mi), vi) in
                p.value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *w *= decay;
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            if !p.value.is_finite() {
                return Err(crate::Error::NonFinite { op: "adamw_step" });
            }
        }
        Ok(())
    }
}
