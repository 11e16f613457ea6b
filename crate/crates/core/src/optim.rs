//! Adaptive-moment optimizer with decoupled weight decay (AdamW).

use serde::{Deserialize, Serialize};

use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state aligned index-by-index with a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step_count: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        AdamW {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update. Parameters whose gradient is `None` are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            debug_assert_eq!(g.shape(), p.shape());
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let decay = 1.0 - c.learning_rate * c.weight_decay;
            for (((pj, &gj), mj), vj) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *pj *= decay;
                *mj = c.beta1 * *mj + (1.0 - c.beta1) * gj;
                *vj = c.beta2 * *vj + (1.0 - c.beta2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *pj -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
            }
        }
    }
}
