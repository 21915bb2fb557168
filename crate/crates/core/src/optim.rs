//! AdamW with decoupled weight decay.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use edos_numcore::{ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter plus the shared step count.
#[derive(Debug, Clone, Default)]
pub struct AdamW<F> {
    pub cfg: AdamWConfig,
    m: HashMap<String, Vec<F>>,
    v: HashMap<String, Vec<F>>,
    t: u64,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            m: HashMap::new(),
            v: HashMap::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every parameter accepted by `trainable`, using the
    /// gradients accumulated in `store`. Decay is applied to the weight
    /// before the adaptive step.
    pub fn step(&mut self, store: &mut ParamStore<F>, trainable: impl Fn(&str) -> bool) {
        self.t += 1;
        let c = self.cfg;
        let f = F::from_f64_lossy;
        let (b1, b2) = (f(c.beta1), f(c.beta2));
        let one = F::one();
        let bc1 = f(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = f(1.0 - c.beta2.powi(self.t as i32));
        let lr = f(c.learning_rate);
        let decay = f(c.learning_rate * c.weight_decay);
        let eps = f(c.eps);
        for (name, p) in store.iter_mut() {
            if !trainable(name) {
                continue;
            }
            let n = p.value.numel();
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![F::zero(); n]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![F::zero(); n]);
            let grad = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                *w = *w - decay * *w;
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
