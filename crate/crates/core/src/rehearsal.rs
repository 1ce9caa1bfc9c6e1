//! Rehearsal memory: a budgeted exemplar buffer and the schedule that mixes
//! it into training.
//!
//! The buffer holds at most `budget` examples, rebalanced after every task so
//! all seen classes hold an (almost) equal share: `floor(budget / classes)`
//! each, with the remainder going to the lowest class labels. Eviction and
//! admission sample uniformly at random from the class's pool.
//!
//! A balanced epoch trains on the whole buffer plus `round(budget / old_classes)`
//! fresh samples per current-task class, so old and new classes carry equal
//! weight. The epoch schedule has three phases: `head` balanced epochs, then
//! every `period`-th epoch balanced (replacing the plain epoch), then `tail`
//! epochs that fine-tune only the classifier on balanced data.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Example, LabeledDataset};
use crate::error::{PstError, Result};

/// Budgeted, class-balanced exemplar store.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MemoryBuffer {
    budget: usize,
    per_class: BTreeMap<usize, Vec<Example>>,
}

impl MemoryBuffer {
    pub fn new(budget: usize) -> Self {
        MemoryBuffer {
            budget,
            per_class: BTreeMap::new(),
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(|v| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        self.per_class
            .iter()
            .map(|(c, v)| (*c, v.len()))
            .collect()
    }

    /// Stored example ids per class — the compact exported form.
    pub fn export_ids(&self) -> BTreeMap<usize, Vec<u64>> {
        self.per_class
            .iter()
            .map(|(c, v)| (*c, v.iter().map(|e| e.id).collect()))
            .collect()
    }

    /// Rebalances the buffer after a task: every class seen so far ends up
    /// with `floor(budget/classes)` exemplars (remainder to the lowest class
    /// labels). Old classes evict uniformly at random; the task's new classes
    /// admit a uniform sample of `task_data`.
    pub fn update_memory(&mut self, task_data: &LabeledDataset, rng: &mut ChaCha8Rng) -> Result<()> {
        if task_data.is_empty() {
            return Err(PstError::Contract("update_memory: empty task data".into()));
        }
        let mut incoming = task_data.by_class();
        let mut classes: Vec<usize> = self.per_class.keys().copied().collect();
        for c in incoming.keys() {
            if !self.per_class.contains_key(c) {
                classes.push(*c);
            }
        }
        classes.sort_unstable();

        let t = classes.len();
        let base = if t > 0 { self.budget / t } else { 0 };
        let extra = if t > 0 { self.budget % t } else { 0 };

        for (rank, class) in classes.iter().enumerate() {
            let quota = base + usize::from(rank < extra);
            match self.per_class.get_mut(class) {
                Some(stored) => {
                    // Old class: evict down to quota, keep order stable for
                    // determinism after the random subset choice.
                    if stored.len() > quota {
                        stored.shuffle(rng);
                        stored.truncate(quota);
                        stored.sort_by_key(|e| e.id);
                    }
                }
                None => {
                    let pool = incoming.remove(class).unwrap_or_default();
                    let mut picked: Vec<Example> =
                        pool.into_iter().cloned().collect();
                    if picked.len() > quota {
                        picked.shuffle(rng);
                        picked.truncate(quota);
                    }
                    picked.sort_by_key(|e| e.id);
                    self.per_class.insert(*class, picked);
                }
            }
        }
        // Classes whose quota came out at zero hold nothing — drop the empty
        // pools so emptiness checks and the mix denominator stay honest.
        self.per_class.retain(|_, v| !v.is_empty());
        debug_assert!(self.len() <= self.budget);
        Ok(())
    }

    /// Builds one balanced training set: the entire buffer plus
    /// `round(budget / stored_classes)` uniform samples per current-task
    /// class, shuffled. With an empty buffer (first task, or budget 0) the
    /// current data comes back unchanged.
    pub fn balanced_mix(
        &self,
        current: &LabeledDataset,
        rng: &mut ChaCha8Rng,
    ) -> LabeledDataset {
        let old_classes = self.per_class.len();
        if old_classes == 0 {
            return current.clone();
        }
        let per_new = (self.budget as f64 / old_classes as f64).round() as usize;
        let mut examples: Vec<Example> = self
            .per_class
            .values()
            .flat_map(|v| v.iter().cloned())
            .collect();
        for (_, pool) in current.by_class() {
            let mut pool: Vec<&Example> = pool;
            if pool.len() > per_new {
                pool.shuffle(rng);
                pool.truncate(per_new);
                pool.sort_by_key(|e| e.id);
            }
            examples.extend(pool.into_iter().cloned());
        }
        examples.shuffle(rng);
        LabeledDataset { examples }
    }
}

/// The three-phase epoch plan for memory-assisted training.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct MixSchedule {
    /// Leading epochs trained on balanced data.
    pub head: usize,
    /// Afterwards, every `period`-th epoch is balanced instead of plain.
    pub period: usize,
    /// Trailing epochs that fine-tune the classifier on balanced data.
    pub tail: usize,
}

impl Default for MixSchedule {
    fn default() -> Self {
        MixSchedule {
            head: 3,
            period: 3,
            tail: 3,
        }
    }
}

/// What one training epoch does with the memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochPhase {
    /// Train every free parameter on the balanced mixture.
    Balanced,
    /// Train every free parameter on current-task data only.
    CurrentOnly,
    /// Train only the classifier's free rows on the balanced mixture.
    ClassifierFinetune,
}

impl std::fmt::Display for EpochPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EpochPhase::Balanced => "balanced",
            EpochPhase::CurrentOnly => "current_only",
            EpochPhase::ClassifierFinetune => "classifier_finetune",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for EpochPhase {
    type Err = crate::error::PstError;
    fn from_str(s: &str) -> Result<EpochPhase> {
        match s {
            "balanced" => Ok(EpochPhase::Balanced),
            "current_only" => Ok(EpochPhase::CurrentOnly),
            "classifier_finetune" => Ok(EpochPhase::ClassifierFinetune),
            other => Err(crate::error::PstError::Config(format!(
                "unknown epoch phase {other:?}"
            ))),
        }
    }
}

/// Maps an epoch index to its phase. The tail takes precedence over the
/// periodic rule when they overlap.
pub fn epochs_using_memory(epoch: usize, total_epochs: usize, schedule: &MixSchedule) -> EpochPhase {
    if epoch < schedule.head {
        return EpochPhase::Balanced;
    }
    if schedule.tail > 0 && epoch >= total_epochs.saturating_sub(schedule.tail) {
        return EpochPhase::ClassifierFinetune;
    }
    if schedule.period >= 1 && (epoch - schedule.head) % schedule.period == 0 {
        return EpochPhase::Balanced;
    }
    EpochPhase::CurrentOnly
}
