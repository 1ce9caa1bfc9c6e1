//! Network definition: layer stack, parameter registry, and trainable units.
//!
//! A network is a fixed stack of layers built once per run from a
//! [`ModelSpec`]. Two bookkeeping views matter for continual learning:
//!
//! - **parameters**: every tensor the optimizer touches, addressed by a
//!   stable [`ParamId`] (enumeration order never changes after build);
//! - **units**: the granules that freeze together. A conv unit is one filter
//!   (its `I×K×K` weight slice, its bias, and the paired batch-norm channel's
//!   scale/shift); a dense or classifier unit is one output row plus bias.
//!
//! The classifier reserves `ceil(1.2 × planned_total_classes)` rows up front
//! so later tasks slot into pre-allocated rows; rows that never activate get
//! no gradient from the masked loss and keep their initialization.
//!
//! Batch-norm convention: biased (1/M) variance both for normalization and
//! for running-statistic updates, fixed momentum, channel axis 1.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnStats, NodeId, Tape};
use crate::error::{PstError, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Shape of the network, independent of learned values.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `[channels, height, width]` for image input, `[dim]` for vector input.
    pub input_shape: Vec<usize>,
    /// Output channels of each conv block (conv + batch-norm + relu),
    /// stride 1, same padding.
    #[serde(default)]
    pub conv_channels: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Mean-pool window applied after the conv blocks; `<= 1` disables it.
    #[serde(default = "default_pool")]
    pub pool: usize,
    /// Hidden dense widths (each followed by relu).
    #[serde(default)]
    pub dense_units: Vec<usize>,
    /// Total classes the classifier must eventually be able to host.
    pub planned_total_classes: usize,
}

fn default_kernel() -> usize {
    3
}

fn default_pool() -> usize {
    2
}

/// Classifier row count: 20% headroom over the planned class total.
pub fn classifier_rows(planned_total_classes: usize) -> usize {
    // ceil(1.2 * n) in integer arithmetic
    (12 * planned_total_classes + 9) / 10
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub enum Layer {
    Conv {
        /// `[out_channels, in_channels, k, k]`
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        scale: Tensor,
        shift: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
    },
    Relu,
    AvgPool {
        k: usize,
    },
    Flatten,
    Dense {
        /// `[out, in]`; each row is one unit.
        weight: Tensor,
        bias: Tensor,
    },
    Classifier {
        weight: Tensor,
        bias: Tensor,
    },
}

impl Layer {
    fn param_slots(&self) -> usize {
        match self {
            Layer::Conv { .. } | Layer::Dense { .. } | Layer::Classifier { .. } => 2,
            Layer::BatchNorm { .. } => 2,
            _ => 0,
        }
    }
}

/// Stable handle to one optimizer-visible tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// What kind of granule a unit is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnitKind {
    Filter,
    Neuron,
    ClassifierRow,
}

/// One freezable granule: `unit` indexes a filter/row within `layer`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnitRef {
    pub layer: usize,
    pub unit: usize,
}

/// How a forward pass treats batch-norm statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch statistics for normalization; caller updates all running stats.
    Train,
    /// Batch statistics for normalization; caller updates running stats only
    /// for channels whose owning unit is still free.
    StatsFrozen,
    /// Running statistics; nothing updates (inference).
    Eval,
    /// Batch statistics, like training, but a pure read: no running-stat
    /// updates anywhere. Used by importance scoring.
    Score,
}

/// Tape bindings produced by one forward pass.
pub struct BoundForward {
    pub logits: NodeId,
    /// Leaf node of every parameter, indexed by `ParamId.0`.
    pub param_nodes: Vec<NodeId>,
    /// `(layer index, batchnorm node)` for every batch-norm layer that
    /// normalized by batch statistics.
    pub bn_nodes: Vec<(usize, NodeId)>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Network {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
}

/// Builds a freshly initialized network: He-style normal weights
/// (`sd = sqrt(2 / fan_in)`), zero biases, identity batch-norm affine,
/// zero-mean/unit-var running statistics. Same seed, same bits.
pub fn build_network(spec: &ModelSpec, seed: u64) -> Result<Network> {
    if spec.planned_total_classes == 0 {
        return Err(PstError::Config("planned_total_classes must be > 0".into()));
    }
    if spec.kernel == 0 || spec.kernel % 2 == 0 {
        return Err(PstError::Config(format!(
            "kernel must be odd and positive, got {}",
            spec.kernel
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();

    let dense_input = match spec.input_shape.as_slice() {
        [dim] => {
            if !spec.conv_channels.is_empty() {
                return Err(PstError::Config(
                    "conv layers require [channels, height, width] input".into(),
                ));
            }
            *dim
        }
        [c, h, w] => {
            let (mut ch, mut hh, mut ww) = (*c, *h, *w);
            for &out in &spec.conv_channels {
                let k = spec.kernel;
                layers.push(Layer::Conv {
                    weight: he_tensor(&mut rng, &[out, ch, k, k], ch * k * k),
                    bias: Tensor::zeros(&[out]),
                    stride: 1,
                    padding: k / 2,
                });
                layers.push(Layer::BatchNorm {
                    scale: Tensor::filled(&[out], 1.0),
                    shift: Tensor::zeros(&[out]),
                    running_mean: Tensor::zeros(&[out]),
                    running_var: Tensor::filled(&[out], 1.0),
                });
                layers.push(Layer::Relu);
                ch = out;
            }
            if spec.pool > 1 {
                if hh % spec.pool != 0 || ww % spec.pool != 0 {
                    return Err(PstError::Config(format!(
                        "pool {} does not tile {}x{} activations",
                        spec.pool, hh, ww
                    )));
                }
                layers.push(Layer::AvgPool { k: spec.pool });
                hh /= spec.pool;
                ww /= spec.pool;
            }
            layers.push(Layer::Flatten);
            ch * hh * ww
        }
        other => {
            return Err(PstError::Config(format!(
                "input_shape must be [dim] or [channels, height, width], got {other:?}"
            )));
        }
    };

    let mut width = dense_input;
    for &units in &spec.dense_units {
        layers.push(Layer::Dense {
            weight: he_tensor(&mut rng, &[units, width], width),
            bias: Tensor::zeros(&[units]),
        });
        layers.push(Layer::Relu);
        width = units;
    }
    let rows = classifier_rows(spec.planned_total_classes);
    layers.push(Layer::Classifier {
        weight: he_tensor(&mut rng, &[rows, width], width),
        bias: Tensor::zeros(&[rows]),
    });

    Ok(Network {
        spec: spec.clone(),
        layers,
    })
}

fn he_tensor(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let sd = (2.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * sd)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data constructed together")
}

impl Network {
    pub fn classifier_rows(&self) -> usize {
        classifier_rows(self.spec.planned_total_classes)
    }

    pub fn classifier_layer(&self) -> usize {
        self.layers.len() - 1
    }

    // ── Parameter registry ──────────────────────────────────────────────

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_slots()).sum()
    }

    /// Parameter tensors in stable `ParamId` order.
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            match layer {
                Layer::Conv { weight, bias, .. }
                | Layer::Dense { weight, bias }
                | Layer::Classifier { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::BatchNorm { scale, shift, .. } => {
                    out.push(scale);
                    out.push(shift);
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { weight, bias, .. }
                | Layer::Dense { weight, bias }
                | Layer::Classifier { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::BatchNorm { scale, shift, .. } => {
                    out.push(scale);
                    out.push(shift);
                }
                _ => {}
            }
        }
        out
    }

    /// `ParamId` of slot `slot` (0 = weight/scale, 1 = bias/shift) in `layer`.
    pub fn param_index(&self, layer: usize, slot: usize) -> ParamId {
        let base: usize = self.layers[..layer].iter().map(|l| l.param_slots()).sum();
        ParamId(base + slot)
    }

    /// Total count of scalar parameter elements.
    pub fn total_param_elements(&self) -> usize {
        self.param_tensors().iter().map(|t| t.numel()).sum()
    }

    // ── Units ───────────────────────────────────────────────────────────

    /// Indices of layers that own freezable units, in forward order.
    /// The classifier is always last.
    pub fn unit_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                Layer::Conv { .. } | Layer::Dense { .. } | Layer::Classifier { .. } => Some(i),
                _ => None,
            })
            .collect()
    }

    pub fn unit_kind(&self, layer: usize) -> Option<UnitKind> {
        match &self.layers[layer] {
            Layer::Conv { .. } => Some(UnitKind::Filter),
            Layer::Dense { .. } => Some(UnitKind::Neuron),
            Layer::Classifier { .. } => Some(UnitKind::ClassifierRow),
            _ => None,
        }
    }

    pub fn unit_count(&self, layer: usize) -> usize {
        match &self.layers[layer] {
            Layer::Conv { weight, .. }
            | Layer::Dense { weight, .. }
            | Layer::Classifier { weight, .. } => weight.shape()[0],
            _ => 0,
        }
    }

    /// Human-readable name for a layer, used in errors and reports.
    pub fn layer_label(&self, layer: usize) -> String {
        let kind = match &self.layers[layer] {
            Layer::Conv { .. } => "conv",
            Layer::BatchNorm { .. } => "batchnorm",
            Layer::Relu => "relu",
            Layer::AvgPool { .. } => "avgpool",
            Layer::Flatten => "flatten",
            Layer::Dense { .. } => "dense",
            Layer::Classifier { .. } => "classifier",
        };
        format!("{kind}{layer}")
    }

    /// The batch-norm layer paired with a conv layer, if any.
    pub fn paired_bn(&self, layer: usize) -> Option<usize> {
        if matches!(self.layers.get(layer), Some(Layer::Conv { .. }))
            && matches!(self.layers.get(layer + 1), Some(Layer::BatchNorm { .. }))
        {
            Some(layer + 1)
        } else {
            None
        }
    }

    /// For a batch-norm layer, the conv layer whose units own its channels.
    pub fn bn_owner(&self, bn_layer: usize) -> Option<usize> {
        if bn_layer == 0 {
            return None;
        }
        self.paired_bn(bn_layer - 1).map(|_| bn_layer - 1)
    }

    /// Every `(ParamId, element range)` belonging to one unit: the weight
    /// slice, the bias element, and the paired batch-norm channel if present.
    pub fn unit_elements(&self, unit: UnitRef) -> Result<Vec<(ParamId, Range<usize>)>> {
        let row = unit.unit;
        let (weight, _bias) = match &self.layers[unit.layer] {
            Layer::Conv { weight, bias, .. }
            | Layer::Dense { weight, bias }
            | Layer::Classifier { weight, bias } => (weight, bias),
            other => {
                return Err(PstError::Contract(format!(
                    "layer {} ({other:?}) has no units",
                    unit.layer
                )))
            }
        };
        if row >= weight.shape()[0] {
            return Err(PstError::Contract(format!(
                "unit {row} out of range for layer {} with {} units",
                unit.layer,
                weight.shape()[0]
            )));
        }
        let per_unit: usize = weight.shape()[1..].iter().product();
        let mut out = vec![
            (
                self.param_index(unit.layer, 0),
                row * per_unit..(row + 1) * per_unit,
            ),
            (self.param_index(unit.layer, 1), row..row + 1),
        ];
        if let Some(bn) = self.paired_bn(unit.layer) {
            out.push((self.param_index(bn, 0), row..row + 1));
            out.push((self.param_index(bn, 1), row..row + 1));
        }
        Ok(out)
    }

    /// The weight-slice portion of a unit (what importance scoring reads).
    pub fn unit_weight_elements(&self, unit: UnitRef) -> Result<(ParamId, Range<usize>)> {
        let elems = self.unit_elements(unit)?;
        Ok(elems[0].clone())
    }

    /// Count of scalar elements a unit owns (weights + bias + bn channel).
    pub fn unit_element_count(&self, unit: UnitRef) -> Result<usize> {
        Ok(self
            .unit_elements(unit)?
            .iter()
            .map(|(_, r)| r.len())
            .sum())
    }

    /// Copies of the unit's parameter values, in `unit_elements` order.
    pub fn unit_values(&self, unit: UnitRef) -> Result<Vec<f64>> {
        let params = self.param_tensors();
        let mut out = Vec::new();
        for (pid, range) in self.unit_elements(unit)? {
            out.extend_from_slice(&params[pid.0].data()[range]);
        }
        Ok(out)
    }

    /// Mutable aliases of a unit's parameters; writing through the view
    /// writes the network.
    pub fn unit_parameters_mut(&mut self, unit: UnitRef) -> Result<UnitParamsMut<'_>> {
        if self.unit_kind(unit.layer).is_none() || unit.unit >= self.unit_count(unit.layer) {
            return Err(PstError::Contract(format!(
                "no unit {} in layer {}",
                unit.unit, unit.layer
            )));
        }
        let row = unit.unit;
        let has_bn = self.paired_bn(unit.layer).is_some();
        let (head, tail) = self.layers.split_at_mut(unit.layer + 1);
        let (weight, bias) = match &mut head[unit.layer] {
            Layer::Conv { weight, bias, .. }
            | Layer::Dense { weight, bias }
            | Layer::Classifier { weight, bias } => (weight, bias),
            _ => unreachable!("unit_kind checked above"),
        };
        let per_unit: usize = weight.shape()[1..].iter().product();
        let weight = &mut weight.data_mut()[row * per_unit..(row + 1) * per_unit];
        let bias = &mut bias.data_mut()[row];
        let (bn_scale, bn_shift) = if has_bn {
            match &mut tail[0] {
                Layer::BatchNorm { scale, shift, .. } => (
                    Some(&mut scale.data_mut()[row]),
                    Some(&mut shift.data_mut()[row]),
                ),
                _ => unreachable!("paired_bn checked above"),
            }
        } else {
            (None, None)
        };
        Ok(UnitParamsMut {
            weight,
            bias,
            bn_scale,
            bn_shift,
        })
    }

    /// Re-initializes one unit exactly as `build_network` would: fresh He
    /// weights, zero bias, identity bn affine, reset bn running statistics.
    pub fn reinit_unit(&mut self, unit: UnitRef, rng: &mut ChaCha8Rng) -> Result<()> {
        let fan_in = match &self.layers[unit.layer] {
            Layer::Conv { weight, .. } => weight.shape()[1..].iter().product::<usize>(),
            Layer::Dense { weight, .. } | Layer::Classifier { weight, .. } => weight.shape()[1],
            other => {
                return Err(PstError::Contract(format!(
                    "layer {} ({other:?}) has no units",
                    unit.layer
                )))
            }
        };
        let sd = (2.0 / fan_in as f64).sqrt();
        {
            let view = self.unit_parameters_mut(unit)?;
            for w in view.weight.iter_mut() {
                *w = rng.sample::<f64, _>(StandardNormal) * sd;
            }
            *view.bias = 0.0;
            if let Some(s) = view.bn_scale {
                *s = 1.0;
            }
            if let Some(s) = view.bn_shift {
                *s = 0.0;
            }
        }
        if let Some(bn) = self.paired_bn(unit.layer) {
            if let Layer::BatchNorm {
                running_mean,
                running_var,
                ..
            } = &mut self.layers[bn]
            {
                running_mean.data_mut()[unit.unit] = 0.0;
                running_var.data_mut()[unit.unit] = 1.0;
            }
        }
        Ok(())
    }

    // ── Forward ─────────────────────────────────────────────────────────

    /// Runs the network on a batch, recording every op on `tape`.
    ///
    /// `batch` must be `[n, ...input_shape]`. Parameters are registered as
    /// leaves (indexed by `ParamId.0` in the result) so a subsequent backward
    /// yields per-parameter gradients.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        batch: &Tensor,
        mode: ForwardMode,
    ) -> Result<BoundForward> {
        let expect: Vec<usize> = std::iter::once(batch.shape().first().copied().unwrap_or(0))
            .chain(self.spec.input_shape.iter().copied())
            .collect();
        if batch.shape() != expect.as_slice() {
            return Err(PstError::Dimension(format!(
                "batch shape {:?} does not match [n, {:?}]",
                batch.shape(),
                self.spec.input_shape
            )));
        }
        let use_batch_stats = !matches!(mode, ForwardMode::Eval);

        let mut param_nodes = Vec::with_capacity(self.param_count());
        let mut bn_nodes = Vec::new();
        let mut cur = tape.leaf(batch.clone());
        for (li, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv {
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let w = tape.leaf(weight.clone());
                    let b = tape.leaf(bias.clone());
                    param_nodes.push(w);
                    param_nodes.push(b);
                    cur = tape.conv2d(cur, w, *stride, *padding)?;
                    cur = tape.channel_bias(cur, b)?;
                }
                Layer::BatchNorm {
                    scale,
                    shift,
                    running_mean,
                    running_var,
                } => {
                    let s = tape.leaf(scale.clone());
                    let h = tape.leaf(shift.clone());
                    param_nodes.push(s);
                    param_nodes.push(h);
                    let stats = if use_batch_stats {
                        BnStats::Batch
                    } else {
                        BnStats::Running {
                            mean: running_mean.clone(),
                            var: running_var.clone(),
                        }
                    };
                    cur = tape.batchnorm(cur, s, h, stats, BN_EPS)?;
                    if use_batch_stats {
                        bn_nodes.push((li, cur));
                    }
                }
                Layer::Relu => {
                    cur = tape.relu(cur)?;
                }
                Layer::AvgPool { k } => {
                    cur = tape.avgpool(cur, *k)?;
                }
                Layer::Flatten => {
                    cur = tape.flatten(cur)?;
                }
                Layer::Dense { weight, bias } | Layer::Classifier { weight, bias } => {
                    let w = tape.leaf(weight.clone());
                    let b = tape.leaf(bias.clone());
                    param_nodes.push(w);
                    param_nodes.push(b);
                    cur = tape.linear(cur, w, b)?;
                }
            }
        }
        Ok(BoundForward {
            logits: cur,
            param_nodes,
            bn_nodes,
        })
    }

    /// Inference logits (running batch-norm statistics, no side effects).
    pub fn forward_eval(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.forward_on_tape(&mut tape, batch, ForwardMode::Eval)?;
        Ok(tape.value(bound.logits).clone())
    }

    /// Folds the batch statistics recorded during a forward pass into the
    /// running statistics: `running ← (1 − momentum)·running + momentum·batch`.
    ///
    /// `update_allowed` maps a batch-norm layer index to a per-channel flag;
    /// layers absent from the map update every channel. Pass the mask built
    /// from the segment map to keep frozen channels' statistics immutable.
    pub fn update_running_stats(
        &mut self,
        tape: &Tape,
        bound: &BoundForward,
        update_allowed: &BTreeMap<usize, Vec<bool>>,
    ) -> Result<()> {
        for (li, node) in &bound.bn_nodes {
            let (batch_mean, batch_var) = tape
                .bn_batch_stats(*node)
                .ok_or_else(|| PstError::Contract("node is not a batch-stats batchnorm".into()))?;
            let allowed = update_allowed.get(li);
            if let Layer::BatchNorm {
                running_mean,
                running_var,
                ..
            } = &mut self.layers[*li]
            {
                for c in 0..running_mean.numel() {
                    if allowed.map_or(true, |m| m[c]) {
                        let rm = &mut running_mean.data_mut()[c];
                        *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * batch_mean[c];
                        let rv = &mut running_var.data_mut()[c];
                        *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * batch_var[c];
                    }
                }
            }
        }
        Ok(())
    }
}

/// Mutable view over one unit's parameters (see `unit_parameters_mut`).
pub struct UnitParamsMut<'a> {
    pub weight: &'a mut [f64],
    pub bias: &'a mut f64,
    pub bn_scale: Option<&'a mut f64>,
    pub bn_shift: Option<&'a mut f64>,
}
