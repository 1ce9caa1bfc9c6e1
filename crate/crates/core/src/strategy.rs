//! Training strategies and the run driver.
//!
//! Six regimes share one trainer; each toggles which of its steps run:
//!
//! | strategy               | memory | selection  | reinforce | freezing              |
//! |------------------------|--------|------------|-----------|-----------------------|
//! | `pst`                  | yes    | importance | yes       | selected units        |
//! | `finetune`             | no     | —          | no        | none                  |
//! | `fixed_representation` | no     | —          | no        | all features after T₁ |
//! | `hybrid1`              | yes    | random     | yes       | selected units        |
//! | `hybrid2`              | yes    | importance | no        | selected (in place)   |
//! | `hybrid3`              | no     | importance | yes       | selected units        |
//!
//! `finetune` is the catastrophic-forgetting floor, `fixed_representation`
//! the frozen-feature ceiling on plasticity; the hybrids each remove one
//! ingredient (scored selection, reinforcement, rehearsal) to show every
//! ingredient earns its keep.
//!
//! A [`RunState`] carries everything a run owns — network, freeze map,
//! memory, RNG streams, compute ledger, metrics — so serializing it between
//! tasks yields resumable, bit-reproducible runs.

use serde::{Deserialize, Serialize};

use crate::data::TaskStream;
use crate::error::{PstError, Result};
use crate::flops::FlopsLedger;
use crate::model::{build_network, ModelSpec, Network};
use crate::rehearsal::MemoryBuffer;
use crate::segment::SegmentMap;
use crate::trainer::{train_task, EpochRecord, RngStreams, TaskSummary, TrainParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Pst,
    Finetune,
    FixedRepresentation,
    Hybrid1,
    Hybrid2,
    Hybrid3,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Pst,
        Strategy::Finetune,
        Strategy::FixedRepresentation,
        Strategy::Hybrid1,
        Strategy::Hybrid2,
        Strategy::Hybrid3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Pst => "pst",
            Strategy::Finetune => "finetune",
            Strategy::FixedRepresentation => "fixed_representation",
            Strategy::Hybrid1 => "hybrid1",
            Strategy::Hybrid2 => "hybrid2",
            Strategy::Hybrid3 => "hybrid3",
        }
    }

    pub fn parse(s: &str) -> Result<Strategy> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                PstError::Config(format!(
                    "unknown strategy {s:?}; expected one of: {}",
                    Strategy::ALL.map(|s| s.name()).join(", ")
                ))
            })
    }

    pub fn plan(self) -> StrategyPlan {
        match self {
            Strategy::Pst => StrategyPlan {
                uses_memory: true,
                selection: Selection::Importance,
                reinforces: true,
                freeze_scope: FreezeScope::Selected,
            },
            Strategy::Finetune => StrategyPlan {
                uses_memory: false,
                selection: Selection::Importance,
                reinforces: false,
                freeze_scope: FreezeScope::None,
            },
            Strategy::FixedRepresentation => StrategyPlan {
                uses_memory: false,
                selection: Selection::Importance,
                reinforces: false,
                freeze_scope: FreezeScope::AllFeatureUnitsAfterFirstTask,
            },
            Strategy::Hybrid1 => StrategyPlan {
                uses_memory: true,
                selection: Selection::Random,
                reinforces: true,
                freeze_scope: FreezeScope::Selected,
            },
            Strategy::Hybrid2 => StrategyPlan {
                uses_memory: true,
                selection: Selection::Importance,
                reinforces: false,
                freeze_scope: FreezeScope::Selected,
            },
            Strategy::Hybrid3 => StrategyPlan {
                uses_memory: false,
                selection: Selection::Importance,
                reinforces: true,
                freeze_scope: FreezeScope::Selected,
            },
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How units are picked for freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Top gradient-weight scores per layer.
    Importance,
    /// Uniformly random among free units (control).
    Random,
}

/// What gets frozen at the end of a task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeScope {
    /// Nothing ever freezes.
    None,
    /// The selected top-`beta` units plus the task's classifier rows.
    Selected,
    /// Every conv filter and dense neuron, once, after the first task.
    AllFeatureUnitsAfterFirstTask,
}

/// The trainer's view of a strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyPlan {
    pub uses_memory: bool,
    pub selection: Selection,
    pub reinforces: bool,
    pub freeze_scope: FreezeScope,
}

/// Everything one run owns. Serializable between tasks for checkpointing;
/// resuming from the serialized form reproduces the uninterrupted run bit
/// for bit.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunState {
    pub strategy: Strategy,
    pub seed: u64,
    pub completed_tasks: usize,
    pub net: Network,
    pub map: SegmentMap,
    pub memory: MemoryBuffer,
    pub ledger: FlopsLedger,
    pub rngs: RngStreams,
    pub records: Vec<EpochRecord>,
    pub summaries: Vec<TaskSummary>,
}

/// Initializes a run: fresh network (weights seeded by `seed`), empty freeze
/// map, empty memory of the given budget, seed-derived RNG streams.
pub fn new_run(
    spec: &ModelSpec,
    strategy: Strategy,
    memory_budget: usize,
    seed: u64,
) -> Result<RunState> {
    let net = build_network(spec, seed)?;
    let map = SegmentMap::new(&net);
    Ok(RunState {
        strategy,
        seed,
        completed_tasks: 0,
        memory: MemoryBuffer::new(if strategy.plan().uses_memory {
            memory_budget
        } else {
            0
        }),
        ledger: FlopsLedger::new(),
        rngs: RngStreams::for_seed(seed),
        records: Vec::new(),
        summaries: Vec::new(),
        net,
        map,
    })
}

/// Trains the next pending task of the stream.
pub fn advance_one_task(
    state: &mut RunState,
    stream: &TaskStream,
    params: &TrainParams,
) -> Result<()> {
    let task_idx = state.completed_tasks;
    if task_idx >= stream.tasks.len() {
        return Err(PstError::Contract(format!(
            "run already finished all {} tasks",
            stream.tasks.len()
        )));
    }
    let plan = state.strategy.plan();
    // Each task's accuracy at its own freeze time, for forgetting deltas.
    let prior_acc: Vec<f64> = state
        .summaries
        .iter()
        .map(|s| s.per_task_acc[s.task])
        .collect();
    let outcome = train_task(
        &mut state.net,
        &mut state.map,
        &mut state.memory,
        &mut state.ledger,
        stream,
        task_idx,
        params,
        &plan,
        &mut state.rngs,
        &prior_acc,
    )?;
    state.records.extend(outcome.records);
    state.summaries.push(outcome.summary);
    state.completed_tasks += 1;
    Ok(())
}

/// Trains every remaining task.
pub fn run_all(state: &mut RunState, stream: &TaskStream, params: &TrainParams) -> Result<()> {
    while state.completed_tasks < stream.tasks.len() {
        advance_one_task(state, stream, params)?;
    }
    Ok(())
}
