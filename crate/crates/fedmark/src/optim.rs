//! Adam over layer-partitioned vectors. Used both by the centralized
//! pretraining loop and as the federated server optimizer, which keeps its
//! moment state across communication rounds.

use serde::{Deserialize, Serialize};

use crate::lm::{ModelParams, UpdateVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam state: first/second moments aligned with the model's layer partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub params: AdamParams,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl Adam {
    pub fn new(model: &ModelParams, params: AdamParams) -> Adam {
        Adam {
            params,
            m: model.layers.iter().map(|l| vec![0.0; l.len()]).collect(),
            v: model.layers.iter().map(|l| vec![0.0; l.len()]).collect(),
            step: 0,
        }
    }

    /// One Adam step on `theta` against gradient `grad` with learning rate `lr`.
    pub fn apply(&mut self, theta: &mut ModelParams, grad: &UpdateVector, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let AdamParams { beta1, beta2, epsilon } = self.params;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (li, layer) in theta.layers.iter_mut().enumerate() {
            let g = &grad.layers[li];
            let m = &mut self.m[li];
            let v = &mut self.v[li];
            for i in 0..layer.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                layer[i] -= lr * mhat / (vhat.sqrt() + epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{build_model, ArchConfig};

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let arch = ArchConfig { vocab_size: 4, context: 2, hidden: 3, hidden_layers: 1 };
        let mut m = build_model(&arch, 0).unwrap();
        let before = m.clone();
        let mut adam = Adam::new(&m, AdamParams::default());
        let zeros = UpdateVector::zeros_like(&m);
        adam.apply(&mut m, &zeros, 0.1);
        assert_eq!(m, before);
    }

    #[test]
    fn first_step_is_signed_lr() {
        // With fresh moments, one Adam step moves each coordinate by
        // lr * g / (|g| + eps), i.e. essentially -lr * sign(g).
        let arch = ArchConfig { vocab_size: 4, context: 2, hidden: 3, hidden_layers: 1 };
        let mut m = build_model(&arch, 0).unwrap();
        let before = m.clone();
        let mut grad = UpdateVector::zeros_like(&m);
        grad.layers[0][0] = 2.0;
        grad.layers[0][1] = -0.5;
        let mut adam = Adam::new(&m, AdamParams::default());
        adam.apply(&mut m, &grad, 0.01);
        let d0 = m.layers[0][0] - before.layers[0][0];
        let d1 = m.layers[0][1] - before.layers[0][1];
        assert!((d0 + 0.01).abs() < 1e-7, "d0={d0}");
        assert!((d1 - 0.01).abs() < 1e-7, "d1={d1}");
    }
}
