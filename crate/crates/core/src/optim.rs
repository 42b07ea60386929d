//! Adam over per-Gaussian parameter blocks.
//!
//! Moments are keyed by Gaussian id so densification and pruning only need
//! to add or drop entries; a Gaussian without state starts from zero
//! moments and step 0.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::model::{GaussianId, Scene, PARAM_COUNT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-15,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: [f64; PARAM_COUNT],
    v: [f64; PARAM_COUNT],
    step: i32,
}

impl Default for Moments {
    fn default() -> Self {
        Moments {
            m: [0.0; PARAM_COUNT],
            v: [0.0; PARAM_COUNT],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub config: AdamConfig,
    state: HashMap<GaussianId, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: HashMap::new(),
        }
    }

    /// One update of every Gaussian. `lr` holds a learning rate per
    /// parameter slot; slots with rate 0 are left untouched.
    pub fn step(&mut self, scene: &mut Scene, grads: &[[f64; PARAM_COUNT]], lr: &[f64; PARAM_COUNT]) {
        assert_eq!(grads.len(), scene.len(), "one gradient block per gaussian");
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        for (g, grad) in scene.gaussians.iter_mut().zip(grads) {
            let st = self.state.entry(g.id).or_default();
            st.step += 1;
            let bc1 = 1.0 - beta1.powi(st.step);
            let bc2 = 1.0 - beta2.powi(st.step);
            let mut p = g.to_params();
            for k in 0..PARAM_COUNT {
                if lr[k] == 0.0 {
                    continue;
                }
                st.m[k] = beta1 * st.m[k] + (1.0 - beta1) * grad[k];
                st.v[k] = beta2 * st.v[k] + (1.0 - beta2) * grad[k] * grad[k];
                let m_hat = st.m[k] / bc1;
                let v_hat = st.v[k] / bc2;
                p[k] -= lr[k] * m_hat / (v_hat.sqrt() + epsilon);
            }
            g.set_params(&p);
        }
    }

    /// Drops state for Gaussians no longer in the scene.
    pub fn retain(&mut self, scene: &Scene) {
        let alive: std::collections::HashSet<GaussianId> = scene.gaussians.iter().map(|g| g.id).collect();
        self.state.retain(|id, _| alive.contains(id));
    }

    pub fn reset(&mut self, id: GaussianId) {
        self.state.remove(&id);
    }

    pub fn tracked(&self) -> usize {
        self.state.len()
    }
}
