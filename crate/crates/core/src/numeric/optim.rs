//! First-order parameter updates: plain SGD and AdamW (decoupled weight decay).

use serde::{Deserialize, Serialize};

use super::params::{GradRecord, ParamSet};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adamw" | "adam" => Ok(OptimizerKind::Adamw),
            other => Err(Error::Unknown {
                kind: "optimizer",
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adamw,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Optimizer with its moment buffers. Moments exist for every group but
/// are only touched for trainable ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub lr: f64,
    pub t: u64,
    pub m: Vec<Tensor2>,
    pub v: Vec<Tensor2>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, lr: f64, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor2> = params
            .groups()
            .iter()
            .map(|g| Tensor2::zeros(g.value.rows(), g.value.cols()))
            .collect();
        let (m, v) = match config.kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adamw => (zeros.clone(), zeros),
        };
        Optimizer {
            config,
            lr,
            t: 0,
            m,
            v,
        }
    }

    /// Descent step on the trainable groups of `params`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradRecord) {
        self.t += 1;
        match self.config.kind {
            OptimizerKind::Sgd => params.apply_step(grads, -self.lr),
            OptimizerKind::Adamw => {
                let OptimizerConfig {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                    ..
                } = self.config;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                let lr = self.lr;
                let trainable: Vec<_> = params.mask().trainable_groups().collect();
                for g in trainable {
                    let grad = grads.get(g).as_slice();
                    let m = self.m[g.0].as_mut_slice();
                    let v = self.v[g.0].as_mut_slice();
                    let p = params.get_mut(g).as_mut_slice();
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * p[i]);
                    }
                }
            }
        }
    }

    /// Ascent step (used by the policy update).
    pub fn ascend(&mut self, params: &mut ParamSet, grads: &GradRecord) {
        let mut neg = grads.clone();
        neg.scale(-1.0);
        self.step(params, &neg);
    }
}
