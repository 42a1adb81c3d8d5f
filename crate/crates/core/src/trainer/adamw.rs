use serde::{Deserialize, Serialize};

use crate::diffcore::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates for the trainable groups of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    /// Indexed by group id; `None` for frozen groups.
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let moments = store
            .groups()
            .iter()
            .map(|g| {
                (!g.frozen).then(|| {
                    let (r, c) = g.value.shape();
                    (Tensor::zeros(r, c), Tensor::zeros(r, c))
                })
            })
            .collect();
        Self {
            config,
            step: 0,
            moments,
        }
    }

    pub fn has_moments(&self, id: usize) -> bool {
        self.moments.get(id).is_some_and(Option::is_some)
    }

    /// One decoupled-weight-decay update:
    /// `p ← p − lr·wd·p`, then `p ← p − lr·m̂ / (√v̂ + eps)`.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.len() != store.len() || self.moments.len() != store.len() {
            return Err(Error::validation("gradients do not match the parameter store"));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite {
                term: "gradient".into(),
            });
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, group) in store.groups_mut().iter_mut().enumerate() {
            let Some((m, v)) = self.moments[id].as_mut() else {
                continue;
            };
            if group.frozen {
                continue;
            }
            let g = grads.by_id(id);
            let p = group.value.data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                p[i] -= c.lr * c.weight_decay * p[i];
                let mi = &mut m.data_mut()[i];
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = m.data()[i] / bc1;
                let v_hat = v.data()[i] / bc2;
                p[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
