//! First-order optimizers: SGD with momentum and Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::array::DenseArray;

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

/// Optimizer choice plus hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerKind {
    SgdMomentum {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

impl OptimizerKind {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerKind::SgdMomentum { lr, momentum }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter slots for one optimizer instance.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    step_count: u64,
    // SGD: velocity. Adam: first moment.
    slot_a: Vec<DenseArray>,
    // Adam only: second moment.
    slot_b: Vec<DenseArray>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerState {
            kind,
            step_count: 0,
            slot_a: Vec::new(),
            slot_b: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    fn ensure_slots(&mut self, params: &[DenseArray]) {
        if self.slot_a.is_empty() {
            self.slot_a = params
                .iter()
                .map(|p| DenseArray::zeros(p.shape().to_vec()))
                .collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.slot_b = self.slot_a.clone();
            }
        }
    }

    /// One in-place update of all parameters given matching gradients.
    pub fn step(&mut self, params: &mut [DenseArray], grads: &[DenseArray]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract(format!(
                "optimizer got {} params and {} grads",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads.iter()) {
            if p.shape() != g.shape() {
                return Err(Error::contract(format!(
                    "optimizer shape mismatch {:?} vs {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.ensure_slots(params);
        if self.slot_a.len() != params.len() {
            return Err(Error::contract(
                "optimizer state sized for a different parameter set",
            ));
        }
        self.step_count += 1;
        match self.kind {
            OptimizerKind::SgdMomentum { lr, momentum } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(self.slot_a.iter_mut()) {
                    for ((pv, gv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(v.data_mut().iter_mut())
                    {
                        *vv = momentum * *vv + gv;
                        *pv -= lr * *vv;
                    }
                }
            }
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                let t = self.step_count as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.slot_a.iter_mut())
                    .zip(self.slot_b.iter_mut())
                {
                    for (((pv, gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut())
                        .zip(v.data_mut().iter_mut())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let m_hat = *mv / bc1;
                        let v_hat = *vv / bc2;
                        *pv -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
