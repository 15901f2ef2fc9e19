use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ParamSlot;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    Sgd {
        lr: f64,
        momentum: f64,
    },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Optimizer {
    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Adam { lr, .. } | Optimizer::Sgd { lr, .. } => *lr,
        }
    }

    pub fn with_lr(mut self, new: f64) -> Self {
        match &mut self {
            Optimizer::Adam { lr, .. } | Optimizer::Sgd { lr, .. } => *lr = new,
        }
        self
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let ok = match *self {
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
            Optimizer::Sgd { lr, momentum } => lr > 0.0 && (0.0..1.0).contains(&momentum),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("bad optimizer settings {self:?}")))
        }
    }

    pub(crate) fn state(&self) -> OptState {
        OptState {
            kind: self.clone(),
            step: 0,
            slots: HashMap::new(),
        }
    }
}

/// Per-parameter moments. Entries that are not finite (`NEG_INF` log-domain
/// weights) are never touched.
pub(crate) struct OptState {
    kind: Optimizer,
    step: i32,
    slots: HashMap<(String, ParamSlot), (Vec<f64>, Vec<f64>)>,
}

impl OptState {
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, key: (&str, ParamSlot), param: &mut [f64], grad: &[f64]) {
        let n = param.len();
        let (m, v) = self
            .slots
            .entry((key.0.to_string(), key.1))
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        match self.kind {
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.step);
                let c2 = 1.0 - beta2.powi(self.step);
                for i in 0..n {
                    if !param[i].is_finite() {
                        continue;
                    }
                    m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    param[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
            Optimizer::Sgd { lr, momentum } => {
                for i in 0..n {
                    if !param[i].is_finite() {
                        continue;
                    }
                    m[i] = momentum * m[i] + grad[i];
                    param[i] -= lr * m[i];
                }
            }
        }
    }
}
