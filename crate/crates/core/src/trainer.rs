//! The per-task training loop.
//!
//! [`train_task`] drives one task end to end:
//!
//! 1. **Train** every free parameter for `epochs` epochs. From the second
//!    task on, the epoch schedule mixes in rehearsal memory: balanced head
//!    epochs, a balanced epoch every `period` epochs after that, and a
//!    classifier-only fine-tune tail (see [`crate::rehearsal`]). The first
//!    task has no memory yet and trains on current data throughout.
//! 2. **Segment**: score free units on a balanced sample, keep the top
//!    `beta` fraction per layer (plus the current task's classifier rows).
//! 3. **Reinforce**: re-initialize the kept units and retrain only them —
//!    same mix schedule, fresh learning-rate decay — so the task's knowledge
//!    settles into exactly the units about to be frozen.
//! 4. **Freeze** the kept units against all later change, then fold the
//!    task's data into the rehearsal buffer.
//!
//! Strategy variants toggle the steps (no memory, random instead of scored
//! selection, freeze without reinforcement, …) via
//! [`crate::strategy::StrategyPlan`].
//!
//! Evaluation is single-head by default — argmax over every class seen so
//! far, ties to the lower class index — with a multi-head variant (argmax
//! restricted to one task's classes) reported per task in the summaries.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{collate, Example, LabeledDataset, TaskStream};
use crate::error::{PstError, Result};
use crate::flops::{scoring_flops, step_flops, FlopsCounters, FlopsLedger};
use crate::importance::{default_beta, importance_scores, select_random, select_top_beta};
use crate::model::{ForwardMode, Network, UnitKind, UnitRef};
use crate::optim::{lr_at, sgd_step, OptimizerState, ParamGrads};
use crate::rehearsal::{epochs_using_memory, EpochPhase, MemoryBuffer, MixSchedule};
use crate::segment::{
    bn_update_mask_from, build_freeze_mask, mask_all_but_classifier, mask_all_but_units,
    FreezeMask, SegmentMap,
};
use crate::strategy::{FreezeScope, Selection, StrategyPlan};

/// How much of each layer to freeze per task.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum BetaSchedule {
    /// One fraction for every task.
    Scalar(f64),
    /// One fraction per task, in stream order.
    PerTask(Vec<f64>),
}

impl BetaSchedule {
    /// The fraction for `task_idx`. `None` (no schedule) falls back to the
    /// task's share of the planned class total.
    pub fn resolve(
        schedule: &Option<BetaSchedule>,
        task_idx: usize,
        task_classes: usize,
        planned_total_classes: usize,
    ) -> Result<f64> {
        match schedule {
            None => Ok(default_beta(task_classes, planned_total_classes)),
            Some(BetaSchedule::Scalar(b)) => Ok(*b),
            Some(BetaSchedule::PerTask(bs)) => {
                bs.get(task_idx).copied().ok_or_else(|| {
                    PstError::Config(format!(
                        "beta schedule has {} entries but task {task_idx} was requested",
                        bs.len()
                    ))
                })
            }
        }
    }
}

/// Hyperparameters for one task's training (shared by every task of a run).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    /// Epochs of the post-segmentation retraining phase; 0 disables it.
    pub reinforce_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub mix: MixSchedule,
    /// Per-task freeze fraction; `None` derives each task's fraction from
    /// its share of the planned class total.
    pub beta: Option<BetaSchedule>,
}

/// The independent random streams a run consumes. Splitting them keeps a
/// change in one consumer (say, an extra memory draw) from silently shifting
/// every other random decision of the run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RngStreams {
    /// Minibatch order.
    pub train: ChaCha8Rng,
    /// Memory buffer admissions, evictions, and balanced-mix draws.
    pub memory: ChaCha8Rng,
    /// Unit re-initialization and random-selection controls.
    pub reinit: ChaCha8Rng,
}

impl RngStreams {
    pub fn for_seed(seed: u64) -> Self {
        let mut train = ChaCha8Rng::seed_from_u64(seed);
        train.set_stream(1);
        let mut memory = ChaCha8Rng::seed_from_u64(seed);
        memory.set_stream(2);
        let mut reinit = ChaCha8Rng::seed_from_u64(seed);
        reinit.set_stream(3);
        RngStreams {
            train,
            memory,
            reinit,
        }
    }
}

/// Which pass of a task an epoch belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Train,
    Reinforce,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Train => "train",
            Stage::Reinforce => "reinforce",
        })
    }
}

impl std::str::FromStr for Stage {
    type Err = PstError;
    fn from_str(s: &str) -> Result<Stage> {
        match s {
            "train" => Ok(Stage::Train),
            "reinforce" => Ok(Stage::Reinforce),
            other => Err(PstError::Config(format!("unknown stage {other:?}"))),
        }
    }
}

/// One epoch's metrics row.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub task: usize,
    pub stage: Stage,
    pub epoch: usize,
    pub phase: EpochPhase,
    pub lr: f64,
    pub train_loss: f64,
    pub steps: usize,
    pub fwd_flops: u128,
    pub bwd_flops: u128,
    pub upd_flops: u128,
    /// Elements trainable under this epoch's mask.
    pub free_elements: usize,
    pub total_elements: usize,
    /// Single-head accuracy per seen task, index 0 = first task.
    pub per_task_acc: Vec<f64>,
    /// Single-head accuracy over all seen test data.
    pub overall_acc: f64,
}

/// End-of-task evaluation and accounting.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TaskSummary {
    pub task: usize,
    pub classes: Vec<usize>,
    pub per_task_acc: Vec<f64>,
    /// Accuracy with the argmax restricted to each task's own classes.
    pub multi_head_acc: Vec<f64>,
    /// Per seen task: its accuracy when it was frozen minus its accuracy
    /// now. The current task's entry is 0 by definition.
    pub forgetting: Vec<f64>,
    pub overall_acc: f64,
    pub flops: FlopsCounters,
    pub frozen_elements: usize,
    pub total_elements: usize,
}

pub struct TaskOutcome {
    pub records: Vec<EpochRecord>,
    pub summary: TaskSummary,
}

/// Accuracy of the network on `data` with the argmax restricted to
/// `classes`; prediction ties break toward the lower class index.
pub fn accuracy_on(
    net: &Network,
    data: &LabeledDataset,
    classes: &BTreeSet<usize>,
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(PstError::Contract("accuracy_on: empty test set".into()));
    }
    if classes.is_empty() {
        return Err(PstError::Contract("accuracy_on: empty class set".into()));
    }
    let rows = net.classifier_rows();
    if let Some(&c) = classes.iter().next_back() {
        if c >= rows {
            return Err(PstError::Contract(format!(
                "class {c} outside the classifier's {rows} rows"
            )));
        }
    }
    let refs: Vec<&Example> = data.examples.iter().collect();
    let mut correct = 0usize;
    for chunk in refs.chunks(batch_size.max(1)) {
        let (batch, labels) = collate(chunk, &net.spec.input_shape)?;
        let logits = net.forward_eval(&batch)?;
        for (row, &label) in labels.iter().enumerate() {
            let mut best = usize::MAX;
            let mut best_v = f64::NEG_INFINITY;
            for &c in classes {
                let v = logits.data()[row * rows + c];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            correct += usize::from(best == label);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

struct EpochStats {
    mean_loss: f64,
    steps: usize,
    fwd: u128,
    bwd: u128,
    upd: u128,
    free_elements: usize,
}

/// One epoch of masked SGD over `data` (order shuffled by `order_rng`).
fn run_epoch(
    net: &mut Network,
    data: &LabeledDataset,
    active: &BTreeSet<usize>,
    mask: &FreezeMask,
    opt: &mut OptimizerState,
    lr: f64,
    batch_size: usize,
    order_rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(PstError::Contract("run_epoch: empty training data".into()));
    }
    let bn_allowed = bn_update_mask_from(net, mask);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(order_rng);

    let mut loss_sum = 0.0;
    let mut stats = EpochStats {
        mean_loss: 0.0,
        steps: 0,
        fwd: 0,
        bwd: 0,
        upd: 0,
        free_elements: mask.total_element_count() - mask.masked_element_count(),
    };
    for chunk in order.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().map(|&i| &data.examples[i]).collect();
        let (batch, labels) = collate(&refs, &net.spec.input_shape)?;
        let mut tape = Tape::new();
        let bound = net.forward_on_tape(&mut tape, &batch, ForwardMode::Train)?;
        let loss = tape.softmax_xent(bound.logits, &labels, active)?;
        let grads_tape = tape.backward(loss)?;
        let grads = ParamGrads::from_tape(&grads_tape, &bound);
        sgd_step(net, &grads, opt, lr, mask)?;
        net.update_running_stats(&tape, &bound, &bn_allowed)?;

        loss_sum += tape.value(loss).item()?;
        let (f, b, u) = step_flops(net, mask, refs.len())?;
        stats.fwd += f;
        stats.bwd += b;
        stats.upd += u;
        stats.steps += 1;
    }
    stats.mean_loss = loss_sum / stats.steps as f64;
    Ok(stats)
}

/// Runs a phase (main training or reinforcement) of `total_epochs` epochs,
/// appending one record per epoch.
#[allow(clippy::too_many_arguments)]
fn run_phase(
    net: &mut Network,
    memory: &MemoryBuffer,
    ledger: &mut FlopsLedger,
    stream: &TaskStream,
    task_idx: usize,
    base_mask: &FreezeMask,
    stage: Stage,
    total_epochs: usize,
    params: &TrainParams,
    plan: &StrategyPlan,
    rngs: &mut RngStreams,
    records: &mut Vec<EpochRecord>,
) -> Result<()> {
    let task = &stream.tasks[task_idx];
    let active = stream.seen_classes(task_idx);
    let mut opt = OptimizerState::new(net, params.base_lr, params.momentum, params.weight_decay);
    let classifier_tail_mask = base_mask.union(&mask_all_but_classifier(net))?;

    for epoch in 0..total_epochs {
        // The first task has nothing to rehearse; memoryless strategies never do.
        let phase = if task_idx == 0 || !plan.uses_memory {
            EpochPhase::CurrentOnly
        } else {
            epochs_using_memory(epoch, total_epochs, &params.mix)
        };
        let data = match phase {
            EpochPhase::CurrentOnly => task.train.clone(),
            EpochPhase::Balanced | EpochPhase::ClassifierFinetune => {
                memory.balanced_mix(&task.train, &mut rngs.memory)
            }
        };
        let mask = match phase {
            EpochPhase::ClassifierFinetune => &classifier_tail_mask,
            _ => base_mask,
        };
        let lr = lr_at(epoch, total_epochs, params.base_lr);
        let stats = run_epoch(
            net,
            &data,
            &active,
            mask,
            &mut opt,
            lr,
            params.batch_size,
            &mut rngs.train,
        )?;
        ledger.charge(stats.fwd, stats.bwd, stats.upd);

        let mut per_task_acc = Vec::with_capacity(task_idx + 1);
        for t in 0..=task_idx {
            per_task_acc.push(accuracy_on(
                net,
                &stream.tasks[t].test,
                &active,
                params.batch_size,
            )?);
        }
        let overall_acc = accuracy_on(net, &stream.seen_test(task_idx), &active, params.batch_size)?;
        records.push(EpochRecord {
            task: task_idx,
            stage,
            epoch,
            phase,
            lr,
            train_loss: stats.mean_loss,
            steps: stats.steps,
            fwd_flops: stats.fwd,
            bwd_flops: stats.bwd,
            upd_flops: stats.upd,
            free_elements: stats.free_elements,
            total_elements: mask.total_element_count(),
            per_task_acc,
            overall_acc,
        });
    }
    Ok(())
}

/// Every conv filter and dense neuron of the network (no classifier rows).
fn all_feature_units(net: &Network) -> Vec<UnitRef> {
    net.unit_layers()
        .into_iter()
        .filter(|&l| net.unit_kind(l) != Some(UnitKind::ClassifierRow))
        .flat_map(|layer| (0..net.unit_count(layer)).map(move |unit| UnitRef { layer, unit }))
        .collect()
}

/// Trains task `task_idx` end to end under the given strategy plan. See the
/// module docs for the step sequence.
///
/// `prior_acc_at_freeze[t]` is task `t`'s accuracy at the end of its own
/// training, used to compute how much of it has been forgotten since.
#[allow(clippy::too_many_arguments)]
pub fn train_task(
    net: &mut Network,
    map: &mut SegmentMap,
    memory: &mut MemoryBuffer,
    ledger: &mut FlopsLedger,
    stream: &TaskStream,
    task_idx: usize,
    params: &TrainParams,
    plan: &StrategyPlan,
    rngs: &mut RngStreams,
    prior_acc_at_freeze: &[f64],
) -> Result<TaskOutcome> {
    if task_idx >= stream.tasks.len() {
        return Err(PstError::Contract(format!(
            "task {task_idx} outside the {}-task stream",
            stream.tasks.len()
        )));
    }
    if params.epochs == 0 {
        return Err(PstError::Contract("train_task: epochs must be >= 1".into()));
    }
    if prior_acc_at_freeze.len() != task_idx {
        return Err(PstError::Contract(format!(
            "expected {} prior accuracies, got {}",
            task_idx,
            prior_acc_at_freeze.len()
        )));
    }
    let task = &stream.tasks[task_idx];
    let active = stream.seen_classes(task_idx);
    ledger.start_task();
    let mut records = Vec::new();

    // 1. Main training over all free parameters.
    let base_mask = build_freeze_mask(net, map)?;
    run_phase(
        net,
        memory,
        ledger,
        stream,
        task_idx,
        &base_mask,
        Stage::Train,
        params.epochs,
        params,
        plan,
        rngs,
        &mut records,
    )?;

    // 2–4. Segment, reinforce, freeze.
    match plan.freeze_scope {
        FreezeScope::None => {}
        FreezeScope::AllFeatureUnitsAfterFirstTask => {
            if task_idx == 0 {
                map.freeze_units(&all_feature_units(net), task_idx)?;
            }
        }
        FreezeScope::Selected => {
            let beta = BetaSchedule::resolve(
                &params.beta,
                task_idx,
                task.classes.len(),
                net.spec.planned_total_classes,
            )?;
            let mut important = match plan.selection {
                Selection::Importance => {
                    let scoring_set = memory.balanced_mix(&task.train, &mut rngs.memory);
                    let report = importance_scores(
                        net,
                        map,
                        &scoring_set,
                        &active,
                        params.batch_size,
                    )?;
                    let (f, b) = scoring_flops(net, scoring_set.len())?;
                    ledger.charge(f, b, 0);
                    select_top_beta(net, map, &report, beta)?
                }
                Selection::Random => select_random(net, map, beta, &mut rngs.reinit)?,
            };
            // The task's classifier rows belong to it no matter their score.
            let cls = net.classifier_layer();
            important.extend(task.classes.iter().map(|&c| UnitRef {
                layer: cls,
                unit: c,
            }));

            if plan.reinforces && params.reinforce_epochs > 0 {
                for unit in &important {
                    net.reinit_unit(*unit, &mut rngs.reinit)?;
                }
                let retrain_mask = mask_all_but_units(net, &important)?;
                run_phase(
                    net,
                    memory,
                    ledger,
                    stream,
                    task_idx,
                    &retrain_mask,
                    Stage::Reinforce,
                    params.reinforce_epochs,
                    params,
                    plan,
                    rngs,
                    &mut records,
                )?;
            }
            map.freeze_units(&important, task_idx)?;
        }
    }

    // 5. Only now does the buffer learn about this task, so scoring and
    // reinforcement saw the same memory the training epochs did.
    if plan.uses_memory {
        memory.update_memory(&task.train, &mut rngs.memory)?;
    }

    // Final evaluation.
    let mut per_task_acc = Vec::with_capacity(task_idx + 1);
    let mut multi_head_acc = Vec::with_capacity(task_idx + 1);
    for t in 0..=task_idx {
        per_task_acc.push(accuracy_on(
            net,
            &stream.tasks[t].test,
            &active,
            params.batch_size,
        )?);
        let own: BTreeSet<usize> = stream.tasks[t].classes.iter().copied().collect();
        multi_head_acc.push(accuracy_on(
            net,
            &stream.tasks[t].test,
            &own,
            params.batch_size,
        )?);
    }
    let overall_acc = accuracy_on(net, &stream.seen_test(task_idx), &active, params.batch_size)?;
    let forgetting: Vec<f64> = (0..=task_idx)
        .map(|t| {
            if t == task_idx {
                0.0
            } else {
                prior_acc_at_freeze[t] - per_task_acc[t]
            }
        })
        .collect();
    let final_mask = build_freeze_mask(net, map)?;
    let summary = TaskSummary {
        task: task_idx,
        classes: task.classes.clone(),
        per_task_acc,
        multi_head_acc,
        forgetting,
        overall_acc,
        flops: ledger.task(task_idx),
        frozen_elements: final_mask.masked_element_count(),
        total_elements: final_mask.total_element_count(),
    };
    Ok(TaskOutcome { records, summary })
}
