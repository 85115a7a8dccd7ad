use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use super::Tensor;
use crate::error::{GtpError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are shaped like the parameters they track.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros_like(t)).collect();
        Adam {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &Tensor {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &Tensor {
        &self.second[index]
    }

    /// One update. Parameters with `trainable[i] == false` and their moments
    /// are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, trainable: &[bool]) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() || trainable.len() != params.len() {
            return Err(GtpError::dim(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moments, {} mask entries",
                    params.len(),
                    grads.len(),
                    self.first.len(),
                    trainable.len()
                ),
            ));
        }
        for id in params.ids() {
            if params.get(id).shape() != grads.get(id).shape()
                || params.get(id).shape() != self.first[id.index()].shape()
            {
                return Err(GtpError::dim(
                    "adam_step",
                    format!("parameter {} shape mismatch", params.name(id)),
                ));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for id in params.ids() {
            if !trainable[id.index()] {
                continue;
            }
            let g = grads.get(id).data();
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales the masked gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, trainable: &[bool], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .filter(|(id, _)| trainable[id.index()])
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for i in 0..grads.len() {
            if trainable[i] {
                let id = super::ParamId(i);
                grads.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= factor);
            }
        }
    }
    norm
}
