use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    #[default]
    Constant,
    /// `lr0 · (1 − e/E)^exponent`.
    Poly { exponent: f64 },
}

impl Schedule {
    pub fn lr(&self, lr0: f64, epoch: usize, total: usize) -> f64 {
        match *self {
            Schedule::Constant => lr0,
            Schedule::Poly { exponent } => {
                let frac = if total == 0 { 1.0 } else { (epoch as f64 / total as f64).min(1.0) };
                lr0 * (1.0 - frac).powf(exponent)
            }
        }
    }
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub schedule: Schedule,
    pub velocities: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(lr: f64, momentum: f64, schedule: Schedule, params: &[Tensor]) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!("need lr ≥ 0 and momentum in [0, 1), got {lr}, {momentum}")));
        }
        Ok(Self { lr, momentum, schedule, velocities: params.iter().map(Tensor::zeros_like).collect() })
    }

    pub fn lr_at(&self, epoch: usize, total: usize) -> f64 {
        self.schedule.lr(self.lr, epoch, total)
    }
}

pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimizerState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocities.len() {
        return Err(Error::shape(format!(
            "sgd_step: {} parameters, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            state.velocities.len()
        )));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(&state.velocities).enumerate() {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(format!(
                "sgd_step: parameter {i} is {:?}, gradient {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocities.iter_mut()) {
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = state.momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}
