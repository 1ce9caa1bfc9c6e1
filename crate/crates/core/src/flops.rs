//! Training-compute accounting.
//!
//! The model counts only the dominant multiply-accumulate terms:
//!
//! * forward: `2 · MACs · batch`, where a conv layer contributes
//!   `out_ch · in_ch · k² · out_h · out_w` MACs per example and a dense or
//!   classifier layer contributes `rows · in_dim`;
//! * backward: twice the forward cost (input and weight gradients);
//! * update: 6 scalar ops per *trainable* element per optimizer step
//!   (momentum decay + add, weight-decay multiply + add, lr multiply,
//!   subtract) — masked elements cost nothing.
//!
//! Batch-norm, bias, activation, and pooling traffic is omitted; the counts
//! feed relative comparisons between strategies, not absolute hardware
//! estimates. Evaluation passes are not charged — the ledger tracks what
//! training (including scoring and reinforcement) spends.

use serde::{Deserialize, Serialize};

use crate::error::{PstError, Result};
use crate::model::{Layer, Network};
use crate::segment::FreezeMask;

pub const UPDATE_OPS_PER_ELEMENT: u128 = 6;

/// Multiply-accumulates for one example's forward pass.
pub fn forward_macs_per_example(net: &Network) -> Result<u128> {
    let mut dims: Vec<usize> = net.spec.input_shape.clone();
    let mut macs: u128 = 0;
    for layer in &net.layers {
        match layer {
            Layer::Conv {
                weight,
                stride,
                padding,
                ..
            } => {
                let (o, i, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
                let (h, w) = (dims[1], dims[2]);
                let oh = (h + 2 * padding - k) / stride + 1;
                let ow = (w + 2 * padding - k) / stride + 1;
                macs += (o * i * k * k * oh * ow) as u128;
                dims = vec![o, oh, ow];
            }
            Layer::BatchNorm { .. } | Layer::Relu => {}
            Layer::AvgPool { k } => {
                dims = vec![dims[0], dims[1] / k, dims[2] / k];
            }
            Layer::Flatten => {
                dims = vec![dims.iter().product()];
            }
            Layer::Dense { weight, .. } | Layer::Classifier { weight, .. } => {
                macs += (weight.shape()[0] * weight.shape()[1]) as u128;
                dims = vec![weight.shape()[0]];
            }
        }
    }
    if dims.len() != 1 {
        return Err(PstError::Contract(
            "network does not end in a classifier".into(),
        ));
    }
    Ok(macs)
}

/// Costs of one training step on `batch` examples under `mask`:
/// `(forward, backward, update)`.
pub fn step_flops(net: &Network, mask: &FreezeMask, batch: usize) -> Result<(u128, u128, u128)> {
    let fwd = 2 * forward_macs_per_example(net)? * batch as u128;
    let bwd = 2 * fwd;
    let trainable = (mask.total_element_count() - mask.masked_element_count()) as u128;
    Ok((fwd, bwd, UPDATE_OPS_PER_ELEMENT * trainable))
}

/// Costs of one gradient-only pass (importance scoring): forward + backward,
/// no update.
pub fn scoring_flops(net: &Network, batch: usize) -> Result<(u128, u128)> {
    let fwd = 2 * forward_macs_per_example(net)? * batch as u128;
    Ok((fwd, 2 * fwd))
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct FlopsCounters {
    pub fwd: u128,
    pub bwd: u128,
    pub upd: u128,
}

impl FlopsCounters {
    pub fn total(&self) -> u128 {
        self.fwd + self.bwd + self.upd
    }
}

/// Cumulative per-task training compute.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct FlopsLedger {
    pub per_task: Vec<FlopsCounters>,
}

impl FlopsLedger {
    pub fn new() -> Self {
        FlopsLedger::default()
    }

    /// Opens the accounting bucket for the next task.
    pub fn start_task(&mut self) {
        self.per_task.push(FlopsCounters::default());
    }

    pub fn charge(&mut self, fwd: u128, bwd: u128, upd: u128) {
        let cur = self
            .per_task
            .last_mut()
            .expect("start_task before charging");
        cur.fwd += fwd;
        cur.bwd += bwd;
        cur.upd += upd;
    }

    pub fn task(&self, t: usize) -> FlopsCounters {
        self.per_task[t]
    }

    pub fn totals(&self) -> FlopsCounters {
        let mut out = FlopsCounters::default();
        for c in &self.per_task {
            out.fwd += c.fwd;
            out.bwd += c.bwd;
            out.upd += c.upd;
        }
        out
    }
}
