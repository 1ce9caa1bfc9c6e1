//! Segment map: which units are frozen, and the element-level masks that
//! enforce it.
//!
//! Freezing is monotone — a unit goes `Free → Frozen{task}` exactly once and
//! never back. Every parameter element of the network belongs to exactly one
//! unit (conv filters own their bias and batch-norm channel, dense rows own
//! their bias), so a segment map induces a total partition of the parameter
//! vector into frozen and free elements.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{PstError, Result};
use crate::model::{Network, UnitRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnitStatus {
    Free,
    /// Frozen while learning task `task` (1-based task ids).
    Frozen { task: usize },
}

/// Per-unit freeze status for every unit-bearing layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentMap {
    per_layer: BTreeMap<usize, Vec<UnitStatus>>,
}

impl SegmentMap {
    /// All units free.
    pub fn new(net: &Network) -> Self {
        let per_layer = net
            .unit_layers()
            .into_iter()
            .map(|l| (l, vec![UnitStatus::Free; net.unit_count(l)]))
            .collect();
        SegmentMap { per_layer }
    }

    pub fn status(&self, unit: UnitRef) -> Result<UnitStatus> {
        self.per_layer
            .get(&unit.layer)
            .and_then(|v| v.get(unit.unit))
            .copied()
            .ok_or_else(|| {
                PstError::Contract(format!(
                    "no unit {} in layer {}",
                    unit.unit, unit.layer
                ))
            })
    }

    pub fn is_frozen(&self, unit: UnitRef) -> bool {
        matches!(self.status(unit), Ok(UnitStatus::Frozen { .. }))
    }

    /// Marks `units` frozen under `task`. Errors (leaving the map untouched)
    /// if any unit is already frozen — freezing never repeats or reverts.
    pub fn freeze_units(&mut self, units: &[UnitRef], task: usize) -> Result<()> {
        for u in units {
            if let UnitStatus::Frozen { task: owner } = self.status(*u)? {
                return Err(PstError::Contract(format!(
                    "unit {} of layer {} is already frozen by task {owner}",
                    u.unit, u.layer
                )));
            }
        }
        for u in units {
            self.per_layer.get_mut(&u.layer).expect("validated")[u.unit] =
                UnitStatus::Frozen { task };
        }
        Ok(())
    }

    /// Unit indices still free in `layer`, ascending.
    pub fn free_units(&self, layer: usize) -> Vec<usize> {
        self.per_layer
            .get(&layer)
            .map(|v| {
                v.iter()
                    .enumerate()
                    .filter(|(_, s)| matches!(s, UnitStatus::Free))
                    .map(|(i, _)| i)
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn frozen_units(&self) -> Vec<(UnitRef, usize)> {
        let mut out = Vec::new();
        for (&layer, statuses) in &self.per_layer {
            for (unit, s) in statuses.iter().enumerate() {
                if let UnitStatus::Frozen { task } = s {
                    out.push((UnitRef { layer, unit }, *task));
                }
            }
        }
        out
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_layer.keys().copied()
    }

    pub fn unit_count(&self, layer: usize) -> usize {
        self.per_layer.get(&layer).map_or(0, |v| v.len())
    }

    pub fn frozen_count(&self, layer: usize) -> usize {
        self.unit_count(layer) - self.free_units(layer).len()
    }
}

/// Element-level trainability mask aligned with the network's parameters;
/// `true` means the element must not change.
#[derive(Clone, Debug, PartialEq)]
pub struct FreezeMask {
    per_param: Vec<Vec<bool>>,
}

impl FreezeMask {
    /// Nothing masked.
    pub fn all_free(net: &Network) -> Self {
        FreezeMask {
            per_param: net
                .param_tensors()
                .iter()
                .map(|t| vec![false; t.numel()])
                .collect(),
        }
    }

    pub fn masked(&self, param: usize, index: usize) -> bool {
        self.per_param[param][index]
    }

    pub fn param_mask(&self, param: usize) -> &[bool] {
        &self.per_param[param]
    }

    pub fn masked_element_count(&self) -> usize {
        self.per_param
            .iter()
            .map(|p| p.iter().filter(|m| **m).count())
            .sum()
    }

    pub fn total_element_count(&self) -> usize {
        self.per_param.iter().map(|p| p.len()).sum()
    }

    /// Union of two masks: an element frozen in either stays frozen.
    pub fn union(&self, other: &FreezeMask) -> Result<FreezeMask> {
        if self.per_param.len() != other.per_param.len() {
            return Err(PstError::Contract("mask layouts differ".into()));
        }
        let per_param = self
            .per_param
            .iter()
            .zip(&other.per_param)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| *x || *y).collect())
            .collect();
        Ok(FreezeMask { per_param })
    }

    fn mark_unit(&mut self, net: &Network, unit: UnitRef, value: bool) -> Result<()> {
        for (pid, range) in net.unit_elements(unit)? {
            for m in &mut self.per_param[pid.0][range] {
                *m = value;
            }
        }
        Ok(())
    }
}

/// Mask with exactly the frozen units' elements set.
pub fn build_freeze_mask(net: &Network, map: &SegmentMap) -> Result<FreezeMask> {
    let mut mask = FreezeMask::all_free(net);
    for (unit, _) in map.frozen_units() {
        mask.mark_unit(net, unit, true)?;
    }
    Ok(mask)
}

/// Mask that blocks everything except the listed units.
/// Used by reinforcement, where only the important units may move.
pub fn mask_all_but_units(net: &Network, units: &[UnitRef]) -> Result<FreezeMask> {
    let mut mask = FreezeMask {
        per_param: net
            .param_tensors()
            .iter()
            .map(|t| vec![true; t.numel()])
            .collect(),
    };
    for u in units {
        mask.mark_unit(net, *u, false)?;
    }
    Ok(mask)
}

/// Mask that blocks everything except the classifier's weight and bias.
/// Used by the classifier-finetune tail epochs; union with the segment-map
/// mask keeps earlier tasks' rows frozen.
pub fn mask_all_but_classifier(net: &Network) -> FreezeMask {
    let cls = net.classifier_layer();
    let w = net.param_index(cls, 0).0;
    let b = net.param_index(cls, 1).0;
    FreezeMask {
        per_param: net
            .param_tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| vec![i != w && i != b; t.numel()])
            .collect(),
    }
}

/// Per-channel "may update running statistics" flags for every batch-norm
/// layer: a channel updates only while its owning conv unit is free.
pub fn bn_update_mask(net: &Network, map: &SegmentMap) -> BTreeMap<usize, Vec<bool>> {
    let mut out = BTreeMap::new();
    for layer in net.unit_layers() {
        if let Some(bn) = net.paired_bn(layer) {
            let mask: Vec<bool> = (0..net.unit_count(layer))
                .map(|u| !map.is_frozen(UnitRef { layer, unit: u }))
                .collect();
            out.insert(bn, mask);
        }
    }
    out
}

/// Like [`bn_update_mask`] but driven by a step's effective trainability
/// mask: a channel's running statistics move only while the owning conv
/// unit's weights are trainable in that step. During classifier-only
/// fine-tuning no feature statistics drift at all.
pub fn bn_update_mask_from(net: &Network, mask: &FreezeMask) -> BTreeMap<usize, Vec<bool>> {
    let mut out = BTreeMap::new();
    for layer in net.unit_layers() {
        if let Some(bn) = net.paired_bn(layer) {
            let weight_param = net.param_index(layer, 0).0;
            let per_unit = net.param_tensors()[weight_param].numel() / net.unit_count(layer);
            let flags: Vec<bool> = (0..net.unit_count(layer))
                .map(|u| !mask.masked(weight_param, u * per_unit))
                .collect();
            out.insert(bn, flags);
        }
    }
    out
}
