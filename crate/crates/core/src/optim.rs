//! SGD and Adam over [`Parameter`]s.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, Parameter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    state: HashMap<ParamId, Moments>,
}

impl Optimizer {
    pub fn sgd(lr: f32) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    /// Adam with betas (0.9, 0.999) and eps 1e-8.
    pub fn adam(lr: f32) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn new(kind: OptimizerKind, lr: f32) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: HashMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Update every unfrozen parameter that holds a gradient, then clear
    /// gradients. Errors if no unfrozen parameter has a gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Parameter>) -> Result<()> {
        let mut touched = 0usize;
        let mut any_unfrozen = false;
        for p in params {
            if p.frozen {
                p.zero_grad();
                continue;
            }
            any_unfrozen = true;
            let Some(grad) = p.tensor.grad.take() else {
                continue;
            };
            touched += 1;
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.tensor.data_mut().iter_mut().zip(&grad) {
                        *w -= self.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let st = self.state.entry(p.id()).or_insert_with(|| Moments {
                        m: vec![0.0; grad.len()],
                        v: vec![0.0; grad.len()],
                        t: 0,
                    });
                    st.t += 1;
                    let bc1 = 1.0 - self.beta1.powi(st.t);
                    let bc2 = 1.0 - self.beta2.powi(st.t);
                    for (((w, g), m), v) in p
                        .tensor
                        .data_mut()
                        .iter_mut()
                        .zip(&grad)
                        .zip(st.m.iter_mut())
                        .zip(st.v.iter_mut())
                    {
                        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
        if any_unfrozen && touched == 0 {
            return Err(Error::usage("optimizer step before backward: no gradients"));
        }
        Ok(())
    }
}
