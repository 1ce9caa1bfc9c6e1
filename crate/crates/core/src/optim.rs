//! SGD with momentum, weight decay, and element-level freeze masking.
//!
//! The update for a free element is
//! `v ← momentum·v + (g + weight_decay·w)` then `w ← w − lr·v`.
//! Masked elements are left bit-for-bit unchanged and their momentum entry is
//! forced to zero, so a later unmasking starts from clean state instead of
//! replaying stale velocity.

use serde::{Deserialize, Serialize};

use crate::autodiff::GradTape;
use crate::error::{PstError, Result};
use crate::model::{BoundForward, Network};
use crate::segment::FreezeMask;
use crate::tensor::Tensor;

/// Per-parameter momentum buffers plus the fixed hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(net: &Network, base_lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerState {
            velocity: net
                .param_tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
            base_lr,
            momentum,
            weight_decay,
        }
    }
}

/// Gradients for every network parameter, indexed like the parameter
/// registry. Parameters the loss never touched hold zeros.
pub struct ParamGrads {
    pub grads: Vec<Tensor>,
}

impl ParamGrads {
    /// Collects per-parameter gradients out of a backward pass.
    pub fn from_tape(tape_grads: &GradTape, bound: &BoundForward) -> ParamGrads {
        ParamGrads {
            grads: bound
                .param_nodes
                .iter()
                .map(|n| tape_grads.grad_or_zeros(*n))
                .collect(),
        }
    }
}

/// Piecewise-constant schedule: full rate for the first 40% of epochs, /10
/// until 80%, /100 after.
pub fn lr_at(epoch: usize, total_epochs: usize, base_lr: f64) -> f64 {
    let e = epoch as f64;
    let t = total_epochs as f64;
    if e < 0.4 * t {
        base_lr
    } else if e < 0.8 * t {
        base_lr / 10.0
    } else {
        base_lr / 100.0
    }
}

/// One masked SGD step over every parameter.
pub fn sgd_step(
    net: &mut Network,
    grads: &ParamGrads,
    state: &mut OptimizerState,
    lr: f64,
    mask: &FreezeMask,
) -> Result<()> {
    let mut params = net.param_tensors_mut();
    if params.len() != grads.grads.len() || params.len() != state.velocity.len() {
        return Err(PstError::Contract(format!(
            "parameter/gradient/momentum count mismatch: {}/{}/{}",
            params.len(),
            grads.grads.len(),
            state.velocity.len()
        )));
    }
    for (pi, param) in params.iter_mut().enumerate() {
        let g = &grads.grads[pi];
        if g.shape() != param.shape() {
            return Err(PstError::Dimension(format!(
                "gradient shape {:?} vs parameter shape {:?} at param {pi}",
                g.shape(),
                param.shape()
            )));
        }
        let v = state.velocity[pi].data_mut();
        let w = param.data_mut();
        let gm = mask.param_mask(pi);
        for i in 0..w.len() {
            if gm[i] {
                v[i] = 0.0;
                continue;
            }
            v[i] = state.momentum * v[i] + (g.data()[i] + state.weight_decay * w[i]);
            w[i] -= lr * v[i];
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(PstError::Numerical(format!(
                "sgd_step produced a non-finite weight in param {pi}"
            )));
        }
    }
    Ok(())
}
