//! Bias-corrected adaptive-moment optimizer with a fixed learning rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GradMap, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Per-parameter update count; sparse parameters (user embeddings not in
    /// every batch) get correct bias correction this way.
    t: u64,
}

/// Optimizer state across steps. Moments are keyed by parameter name and
/// persist even when a parameter sits out a step.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamState {
    pub params: AdamParams,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(params: AdamParams) -> Self {
        AdamState {
            params,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update to every `(name, tensor)` pair using the matching
    /// gradient. Every updated parameter must have a gradient entry.
    pub fn step(&mut self, targets: &mut [(String, &mut Tensor)], grads: &GradMap) -> Result<()> {
        self.advance();
        for (name, tensor) in targets.iter_mut() {
            let grad = grads.get(name).ok_or_else(|| TensorError::Invalid {
                op: "adam_step",
                msg: format!("no gradient for parameter '{name}'"),
            })?;
            **tensor = self.update_one(name, tensor, grad)?;
        }
        Ok(())
    }

    /// Advance the state's step counter; call once per optimization step
    /// before `update_one`.
    pub fn advance(&mut self) {
        self.step += 1;
    }

    /// Update a single named parameter. Moments persist across steps; new
    /// names start from zero moments.
    pub fn update_one(&mut self, name: &str, tensor: &Tensor, grad: &Tensor) -> Result<Tensor> {
        if grad.shape() != tensor.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: tensor.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let n = tensor.numel();
        let slot = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
        if slot.m.len() != n {
            return Err(TensorError::Invalid {
                op: "adam_step",
                msg: format!("moment shape drift for '{name}'"),
            });
        }
        slot.t += 1;
        let p = &self.params;
        let bc1 = 1.0 - p.beta1.powi(slot.t as i32);
        let bc2 = 1.0 - p.beta2.powi(slot.t as i32);
        let mut data = tensor.data().to_vec();
        for i in 0..n {
            let g = grad.data()[i];
            slot.m[i] = p.beta1 * slot.m[i] + (1.0 - p.beta1) * g;
            slot.v[i] = p.beta2 * slot.v[i] + (1.0 - p.beta2) * g * g;
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            data[i] -= p.lr * m_hat / (v_hat.sqrt() + p.eps);
        }
        Tensor::new(tensor.shape().to_vec(), data)
    }

    /// Moment entries for serialization: `(name, t, m, v)` in name order.
    pub fn moment_entries(&self) -> impl Iterator<Item = (&str, u64, &[f64], &[f64])> {
        self.moments
            .iter()
            .map(|(name, m)| (name.as_str(), m.t, m.m.as_slice(), m.v.as_slice()))
    }

    /// Rebuild state from serialized parts.
    pub fn restore(
        params: AdamParams,
        step: u64,
        entries: impl IntoIterator<Item = (String, u64, Vec<f64>, Vec<f64>)>,
    ) -> Self {
        AdamState {
            params,
            step,
            moments: entries
                .into_iter()
                .map(|(name, t, m, v)| (name, Moments { m, v, t }))
                .collect(),
        }
    }
}
