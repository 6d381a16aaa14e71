use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient descent with decoupled weight decay.
    #[default]
    Sgd,
    Adam,
}

/// First-order optimizer over a [`ParamStore`].
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Optimizer::new(OptimizerKind::Sgd, lr, 0.0)
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer::new(OptimizerKind::Adam, lr, 0.0)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Descent step: moves parameters against `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if self.weight_decay != 0.0 {
                let decay = 1.0 - self.lr * self.weight_decay;
                for v in p.values_mut() {
                    *v *= decay;
                }
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (v, gv) in p.values_mut().iter_mut().zip(g.values()) {
                        *v -= self.lr * gv;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, s) = self
                        .moments
                        .entry(name.clone())
                        .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                    let c1 = 1.0 - self.beta1.powi(t);
                    let c2 = 1.0 - self.beta2.powi(t);
                    for (i, (v, &gv)) in p.values_mut().iter_mut().zip(g.values()).enumerate() {
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gv;
                        s[i] = self.beta2 * s[i] + (1.0 - self.beta2) * gv * gv;
                        let mhat = m[i] / c1;
                        let shat = s[i] / c2;
                        *v -= self.lr * mhat / (shat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
