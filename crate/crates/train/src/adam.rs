//! Adam with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::OptimizerConfig;
use crate::model::{Grads, Tensor, TensorKind};

#[derive(Debug, Error, PartialEq)]
pub enum StepError {
    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },
}

/// First and second moment buffers plus the update counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(tensors: &[Tensor]) -> Self {
        AdamState {
            step: 0,
            m: tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    /// One update. Decay (`p -= lr·wd·p`) hits `Weight` tensors before the
    /// moment-based step and never touches biases or norm gains.
    pub fn step(&mut self, tensors: &mut [Tensor], grads: &Grads, cfg: &OptimizerConfig) -> Result<(), StepError> {
        if let Some(t) = tensors
            .iter()
            .zip(grads)
            .find(|(_, g)| g.iter().any(|x| !x.is_finite()))
            .map(|(t, _)| t)
        {
            return Err(StepError::NonFiniteGradient { block: t.name.clone() });
        }
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let decay = 1.0 - cfg.lr * cfg.weight_decay;
        for (i, t) in tensors.iter_mut().enumerate() {
            let g = &grads[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let decayed = t.kind == TensorKind::Weight;
            for j in 0..t.data.len() {
                if decayed {
                    t.data[j] *= decay;
                }
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                t.data[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
