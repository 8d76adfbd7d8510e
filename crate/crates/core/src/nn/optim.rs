use std::collections::HashMap;

use super::graph::Gradients;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Adaptive-moment optimizer without weight decay, with optional global
/// gradient-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    moments: HashMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, clip_norm: Option<f64>) -> Self {
        Self { beta1, beta2, eps: 1e-8, clip_norm, step: 0, moments: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates the parameters in `trainable` that received a gradient.
    /// Returns the (pre-clipping) global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, trainable: &[ParamId], lr: f64) -> f64 {
        let selected: Vec<(ParamId, &Tensor)> = trainable.iter().filter_map(|&id| grads.param(id).map(|g| (id, g))).collect();
        let norm = selected.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt();
        let clip = match self.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in selected {
            let param = store.get_mut(id);
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(param.rows, param.cols), Tensor::zeros(param.rows, param.cols)));
            for i in 0..param.data.len() {
                let gi = g.data[i] * clip;
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                param.data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        norm
    }
}
