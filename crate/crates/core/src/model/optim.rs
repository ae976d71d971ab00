use serde::{Deserialize, Serialize};

use super::Params;
use crate::error::{Error, Result};

/// One SGD step with classic momentum and coupled weight decay:
/// `v ← m·v + (g + wd·θ)`, `θ ← θ − lr·v`.
pub fn sgd_step(
    params: &mut Params,
    velocity: &mut Params,
    grads: &Params,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if !params.is_aligned_with(grads) || !params.is_aligned_with(velocity) {
        return Err(Error::Shape("gradients are not aligned with parameters".into()));
    }
    for ((theta, v), g) in params
        .arrays_mut()
        .iter_mut()
        .zip(velocity.arrays_mut().iter_mut())
        .zip(grads.arrays())
    {
        for ((t, vi), gi) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = momentum * *vi + (gi + weight_decay * *t);
            *t -= lr * *vi;
        }
    }
    Ok(())
}

/// Momentum SGD holding its velocity buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Params,
}

impl Sgd {
    pub fn new(params: &Params, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) -> Result<()> {
        sgd_step(params, &mut self.velocity, grads, lr, self.momentum, self.weight_decay)
    }
}
