//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::params::{Gradients, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    /// Common defaults: β1 = 0.9, β2 = 0.999, ε = 1e−8.
    pub fn standard(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Hyperparameters for output-layer personalization:
    /// α = 0.001, β1 = 0.5, β2 = 0.9, ε = 1e−8.
    pub fn personalization() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.5,
            beta2: 0.9,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    moments: Vec<Option<(Tensor, Tensor)>>,
    step: u64,
}

impl AdamState {
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor, &Tensor)> {
        self.moments
            .get(id.0)
            .and_then(Option::as_ref)
            .map(|(m, v)| (m, v))
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: AdamState::default(),
        }
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    /// Updates every trainable parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let ids: Vec<ParamId> = store
            .iter()
            .filter(|(_, p)| p.trainable())
            .map(|(id, _)| id)
            .collect();
        self.step_ids(store, grads, &ids)
    }

    /// Updates only the trainable parameters of `group`.
    pub fn step_group(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        group: ParamGroup,
    ) -> Result<()> {
        let ids: Vec<ParamId> = store
            .iter()
            .filter(|(_, p)| p.trainable() && p.group() == group)
            .map(|(id, _)| id)
            .collect();
        self.step_ids(store, grads, &ids)
    }

    fn step_ids(&mut self, store: &mut ParamStore, grads: &Gradients, ids: &[ParamId]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Contract(format!(
                "gradients cover {} parameters, store has {}",
                grads.len(),
                store.len()
            )));
        }
        // Validate everything before mutating anything.
        for &id in ids {
            let (p, g) = (store.get(id), grads.get(id));
            if p.value.shape() != g.shape() {
                return shape_err("adam_step", p.value.shape(), g.shape());
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {:?}",
                    p.name()
                )));
            }
        }
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        if self.state.moments.len() < store.len() {
            self.state.moments.resize(store.len(), None);
        }
        for &id in ids {
            let g = grads.get(id);
            let (m, v) = self.state.moments[id.0]
                .get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let theta = store.value_mut(id).data_mut();
            for (((th, mi), vi), &gi) in theta
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *th -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
