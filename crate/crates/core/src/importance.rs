//! Unit importance scoring and top-fraction selection.
//!
//! After a task is trained, each free unit (conv filter or dense neuron) gets
//! a score: the gradient-weight product `Σ |∂loss/∂w · w|` summed over the
//! unit's weight elements, averaged over scoring minibatches. A large score
//! means the loss is locally sensitive to that unit, so it mattered for the
//! task just learned. Scoring is a single read-only pass: batch statistics
//! normalize each minibatch, running statistics are left untouched, and no
//! parameter changes.
//!
//! Selection then keeps, per layer, the `round(beta · units_in_layer)`
//! highest-scoring free units (ties break toward the lower unit index). The
//! classifier never competes here — its rows are tied to classes, not picked
//! by score. Asking for more units than a layer has free is a capacity
//! error: the network has run out of room for new tasks.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{collate, LabeledDataset};
use crate::error::{PstError, Result};
use crate::model::{ForwardMode, Network, UnitKind, UnitRef};
use crate::segment::SegmentMap;

/// Per-layer unit scores from one scoring pass. Frozen units (and every
/// classifier row) carry `None`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ImportanceReport {
    pub per_layer: BTreeMap<usize, Vec<Option<f64>>>,
    pub batches: usize,
}

/// Default selection fraction for a task: its share of the planned class
/// total, so capacity is spent proportionally to how much of the final
/// problem this task represents.
pub fn default_beta(task_classes: usize, planned_total_classes: usize) -> f64 {
    task_classes as f64 / planned_total_classes as f64
}

/// Scores every free non-classifier unit with the mean gradient-weight
/// product over one pass of `data` in minibatches of `batch_size`.
///
/// The pass normalizes with batch statistics (so scores do not depend on
/// stale running statistics) and leaves the network byte-identical.
pub fn importance_scores(
    net: &Network,
    map: &SegmentMap,
    data: &LabeledDataset,
    active: &BTreeSet<usize>,
    batch_size: usize,
) -> Result<ImportanceReport> {
    if data.is_empty() {
        return Err(PstError::Contract("importance_scores: empty data".into()));
    }
    if batch_size == 0 {
        return Err(PstError::Contract("importance_scores: batch_size 0".into()));
    }

    let scored_layers: Vec<usize> = net
        .unit_layers()
        .into_iter()
        .filter(|&l| net.unit_kind(l) != Some(UnitKind::ClassifierRow))
        .collect();
    let mut sums: BTreeMap<usize, Vec<f64>> = scored_layers
        .iter()
        .map(|&l| (l, vec![0.0; net.unit_count(l)]))
        .collect();

    let refs: Vec<&crate::data::Example> = data.examples.iter().collect();
    let mut batches = 0usize;
    for chunk in refs.chunks(batch_size) {
        let (batch, labels) = collate(chunk, &net.spec.input_shape)?;
        let mut tape = Tape::new();
        let bound = net.forward_on_tape(&mut tape, &batch, ForwardMode::Score)?;
        let loss = tape.softmax_xent(bound.logits, &labels, active)?;
        let grads = tape.backward(loss)?;
        for &layer in &scored_layers {
            let layer_sums = sums.get_mut(&layer).expect("layer registered above");
            for unit in map.free_units(layer) {
                let (pid, range) = net.unit_weight_elements(UnitRef { layer, unit })?;
                let g = grads.grad_or_zeros(bound.param_nodes[pid.0]);
                let w = net.param_tensors()[pid.0];
                let mut s = 0.0;
                for i in range {
                    s += (g.data()[i] * w.data()[i]).abs();
                }
                layer_sums[unit] += s;
            }
        }
        batches += 1;
    }

    let per_layer = scored_layers
        .iter()
        .map(|&layer| {
            let free: BTreeSet<usize> = map.free_units(layer).into_iter().collect();
            let scores = sums[&layer]
                .iter()
                .enumerate()
                .map(|(u, s)| free.contains(&u).then_some(s / batches as f64))
                .collect();
            (layer, scores)
        })
        .collect();
    Ok(ImportanceReport { per_layer, batches })
}

fn selection_quota(net: &Network, map: &SegmentMap, layer: usize, beta: f64) -> Result<usize> {
    let want = (beta * net.unit_count(layer) as f64).round() as usize;
    let free = map.free_units(layer).len();
    if want > free {
        return Err(PstError::CapacityExhausted {
            layer: net.layer_label(layer),
            requested: want,
            free,
        });
    }
    Ok(want)
}

/// Keeps the `round(beta · layer_units)` highest-scoring free units per
/// scored layer; ties break toward the lower unit index. Returns units in
/// (layer, index) order.
pub fn select_top_beta(
    net: &Network,
    map: &SegmentMap,
    report: &ImportanceReport,
    beta: f64,
) -> Result<Vec<UnitRef>> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(PstError::Contract(format!(
            "selection fraction must be in (0, 1], got {beta}"
        )));
    }
    let mut picked = Vec::new();
    for (&layer, scores) in &report.per_layer {
        let want = selection_quota(net, map, layer, beta)?;
        let mut ranked: Vec<(f64, usize)> = scores
            .iter()
            .enumerate()
            .filter_map(|(u, s)| s.map(|s| (s, u)))
            .collect();
        // Highest score first; equal scores keep the lower index first.
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut units: Vec<usize> = ranked[..want].iter().map(|&(_, u)| u).collect();
        units.sort_unstable();
        picked.extend(units.into_iter().map(|unit| UnitRef { layer, unit }));
    }
    Ok(picked)
}

/// Control selection: the same per-layer quotas as [`select_top_beta`] but
/// drawn uniformly at random from the free units, ignoring scores.
pub fn select_random(
    net: &Network,
    map: &SegmentMap,
    beta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<UnitRef>> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(PstError::Contract(format!(
            "selection fraction must be in (0, 1], got {beta}"
        )));
    }
    let mut picked = Vec::new();
    for layer in net.unit_layers() {
        if net.unit_kind(layer) == Some(UnitKind::ClassifierRow) {
            continue;
        }
        let want = selection_quota(net, map, layer, beta)?;
        let mut free = map.free_units(layer);
        free.shuffle(rng);
        let mut units: Vec<usize> = free[..want].to_vec();
        units.sort_unstable();
        picked.extend(units.into_iter().map(|unit| UnitRef { layer, unit }));
    }
    Ok(picked)
}
