//! Adam with bias correction over the head's trainable tensors.

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{HeadGrads, HeadParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    first_moment: Vec<ArrayD<f64>>,
    second_moment: Vec<ArrayD<f64>>,
}

impl OptimizerState {
    pub fn new(params: &HeadParams, config: AdamConfig) -> Self {
        let zeros: Vec<ArrayD<f64>> = params
            .trainable()
            .iter()
            .map(|t| ArrayD::zeros(t.shape()))
            .collect();
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// Applies one update with the given learning rate (the schedule lives
    /// in the trainer).
    pub fn step_with_lr(&mut self, params: &mut HeadParams, grads: &HeadGrads, lr: f64) -> Result<()> {
        let grads = grads.tensors();
        let mut targets = params.trainable_mut();
        for (i, (g, t)) in grads.iter().zip(targets.iter()).enumerate() {
            if g.shape() != t.shape() || g.shape() != self.first_moment[i].shape() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {i}: grad {:?}, param {:?}",
                    g.shape(),
                    t.shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            beta1, beta2, epsilon, ..
        } = self.config;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (g, t)) in grads.iter().zip(targets.iter_mut()).enumerate() {
            Zip::from(t)
                .and(g)
                .and(&mut self.first_moment[i])
                .and(&mut self.second_moment[i])
                .for_each(|theta, &grad, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * grad;
                    *v = beta2 * *v + (1.0 - beta2) * grad * grad;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *theta -= lr * m_hat / (v_hat.sqrt() + epsilon);
                });
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut HeadParams, grads: &HeadGrads) -> Result<()> {
        self.step_with_lr(params, grads, self.config.learning_rate)
    }
}
