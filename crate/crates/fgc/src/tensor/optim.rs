//! Nesterov-momentum stochastic gradient descent.

use super::Tensor;
use crate::error::{Error, Result};

/// One Nesterov update on a raw parameter buffer.
///
/// The recurrence (with decay applied unless `decay_exempt`):
///   g   <- grad + weight_decay * p
///   v   <- momentum * v + g
///   p   <- p - lr * (g + momentum * v)
pub fn sgd_step(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    decay_exempt: bool,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::ShapeMismatch {
            op: "sgd_step",
            lhs: vec![param.len()],
            rhs: vec![grad.len()],
        });
    }
    if lr <= 0.0 {
        return Err(Error::config("sgd learning rate must be > 0"));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::config("sgd momentum must lie in [0, 1)"));
    }
    let wd = if decay_exempt { 0.0 } else { weight_decay };
    for i in 0..param.len() {
        let g = grad[i] + wd * param[i];
        velocity[i] = momentum * velocity[i] + g;
        param[i] -= lr * (g + momentum * velocity[i]);
    }
    Ok(())
}

/// Optimizer owning the parameter list, velocity buffers and hyper-parameters.
pub struct Sgd {
    params: Vec<Tensor>,
    decay_exempt: Vec<bool>,
    velocity: Vec<Vec<f64>>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    /// `params` pairs each tensor with a flag that exempts it from weight
    /// decay (used for gating-module parameters).
    pub fn new(
        params: Vec<(Tensor, bool)>,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<Sgd> {
        if lr <= 0.0 {
            return Err(Error::config("sgd learning rate must be > 0"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config("sgd momentum must lie in [0, 1)"));
        }
        let velocity = params.iter().map(|(t, _)| vec![0.0; t.numel()]).collect();
        let (params, decay_exempt) = params.into_iter().unzip();
        Ok(Sgd {
            params,
            decay_exempt,
            velocity,
            lr,
            momentum,
            weight_decay,
        })
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn step(&mut self) -> Result<()> {
        for (i, p) in self.params.iter().enumerate() {
            let grad = p.grad();
            let mut data = p.to_vec();
            sgd_step(
                &mut data,
                &grad,
                &mut self.velocity[i],
                self.lr,
                self.momentum,
                self.weight_decay,
                self.decay_exempt[i],
            )?;
            p.set_data(&data)?;
        }
        Ok(())
    }

    /// Velocity buffers in parameter order (for checkpointing).
    pub fn velocities(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn restore_velocities(&mut self, velocities: Vec<Vec<f64>>) -> Result<()> {
        if velocities.len() != self.velocity.len()
            || velocities
                .iter()
                .zip(&self.velocity)
                .any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::contract(
                "restore_velocities: buffer layout mismatch".to_string(),
            ));
        }
        self.velocity = velocities;
        Ok(())
    }
}
