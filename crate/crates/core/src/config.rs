//! TOML run configuration: parsing, defaulting, validation, and the
//! builders that turn a config into data, a stream, and trainer parameters.
//!
//! Validation never stops at the first problem — it returns one error
//! listing every violated field, so a config can be fixed in one pass.
//! A resolved copy (defaults filled in) is serializable back to TOML for
//! auditability.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    load_image_dataset, make_stream, splitmix64, synth_gaussians, ImageFormat, LabeledDataset,
    NormStats, SplitDataset, TaskStream,
};
use crate::error::{PstError, Result};
use crate::model::{classifier_rows, ModelSpec};
use crate::rehearsal::MixSchedule;
use crate::strategy::Strategy;
use crate::trainer::{BetaSchedule, TrainParams};

fn default_name() -> String {
    "run".into()
}
fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn default_classes() -> usize {
    10
}
fn default_dim() -> usize {
    64
}
fn default_per_class() -> usize {
    100
}
fn default_separation() -> f64 {
    6.0
}
fn default_data_seed() -> u64 {
    0xDA7A
}
fn default_cpt() -> usize {
    5
}
fn default_epochs() -> usize {
    30
}
fn default_reinforce() -> usize {
    20
}
fn default_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_memory_budget() -> usize {
    100
}
fn default_mix() -> usize {
    3
}

fn default_model() -> ModelSpec {
    ModelSpec {
        input_shape: vec![1, 8, 8],
        conv_channels: vec![16, 32],
        kernel: 3,
        pool: 2,
        dense_units: vec![128],
        planned_total_classes: 10,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Directory-safe run name; the output folder is `<out_root>/<name>`.
    #[serde(default = "default_name")]
    pub name: String,
    pub strategy: Strategy,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Output root; falls back to `$PST_OUT_ROOT`, then `./runs`.
    #[serde(default)]
    pub out_root: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Class-conditional Gaussian clouds.
    Synthetic {
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        /// Data-generation seed — fixed across run seeds so every seed sees
        /// the same dataset, as fair seed averaging requires.
        #[serde(default = "default_data_seed")]
        seed: u64,
    },
    /// Binary records: one label byte then `channels·height·width` pixel bytes.
    ImageRaw {
        path: PathBuf,
        channels: usize,
        height: usize,
        width: usize,
        #[serde(default)]
        downsample: Option<usize>,
        /// Per-channel standardization constants; omitted = computed from
        /// the data itself.
        #[serde(default)]
        normalize: Option<NormStats>,
    },
    /// PNG directory with a `manifest.csv` of `id,path,label` rows.
    ImagePng {
        path: PathBuf,
        #[serde(default)]
        downsample: Option<usize>,
        #[serde(default)]
        normalize: Option<NormStats>,
    },
}

impl DatasetConfig {
    pub fn num_classes(&self) -> Option<usize> {
        match self {
            DatasetConfig::Synthetic { classes, .. } => Some(*classes),
            _ => None, // image datasets discover their classes at load time
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StreamSection {
    #[serde(default = "default_cpt")]
    pub classes_per_task: usize,
}

impl Default for StreamSection {
    fn default() -> Self {
        StreamSection {
            classes_per_task: default_cpt(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_reinforce")]
    pub reinforce_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Rehearsal budget (total stored examples); 0 disables memory.
    #[serde(default = "default_memory_budget")]
    pub memory_budget: usize,
    #[serde(default = "default_mix")]
    pub mix_head: usize,
    #[serde(default = "default_mix")]
    pub mix_period: usize,
    #[serde(default = "default_mix")]
    pub mix_tail: usize,
    /// Scalar or per-task list; omitted = each task's share of the planned
    /// class total.
    #[serde(default)]
    pub beta: Option<BetaSchedule>,
}

impl Default for TrainSection {
    fn default() -> Self {
        toml::from_str("").expect("empty train section defaults")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub stream: StreamSection,
    #[serde(default = "default_model")]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| PstError::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_toml(&text)
    }

    /// The resolved form (all defaults filled in), for auditing.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| PstError::Config(format!("config serialize: {e}")))
    }

    /// Number of tasks the stream will have, when the class count is known
    /// up front (synthetic data).
    pub fn task_count(&self) -> Option<usize> {
        self.dataset
            .num_classes()
            .map(|c| c.div_ceil(self.stream.classes_per_task))
    }

    /// Class count per task, in stream order (remainder task last).
    fn task_class_counts(&self, classes: usize) -> Vec<usize> {
        let cpt = self.stream.classes_per_task;
        let full = classes / cpt;
        let rem = classes % cpt;
        let mut counts = vec![cpt; full];
        if rem > 0 {
            counts.push(rem);
        }
        counts
    }

    /// Checks every field and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();

        if self.run.name.is_empty()
            || !self
                .run
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            bad.push(format!(
                "run.name {:?} must be non-empty [A-Za-z0-9_-]",
                self.run.name
            ));
        }
        if self.run.seeds.is_empty() {
            bad.push("run.seeds must not be empty".into());
        }
        {
            let mut seen = BTreeSet::new();
            for s in &self.run.seeds {
                if !seen.insert(*s) {
                    bad.push(format!("run.seeds repeats seed {s}"));
                }
            }
        }

        let t = &self.train;
        if t.epochs == 0 {
            bad.push("train.epochs must be >= 1".into());
        }
        if t.batch_size == 0 {
            bad.push("train.batch_size must be >= 1".into());
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            bad.push(format!("train.lr must be positive and finite, got {}", t.lr));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            bad.push(format!("train.momentum must be in [0, 1), got {}", t.momentum));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            bad.push(format!(
                "train.weight_decay must be >= 0 and finite, got {}",
                t.weight_decay
            ));
        }
        if t.mix_period == 0 {
            bad.push("train.mix_period must be >= 1".into());
        }

        if let DatasetConfig::Synthetic {
            classes,
            dim,
            per_class,
            separation,
            ..
        } = &self.dataset
        {
            if *classes == 0 {
                bad.push("dataset.classes must be >= 1".into());
            }
            if *dim == 0 {
                bad.push("dataset.dim must be >= 1".into());
            }
            if *per_class == 0 {
                bad.push("dataset.per_class must be >= 1".into());
            }
            if !(*separation >= 0.0) {
                bad.push(format!(
                    "dataset.separation must be >= 0, got {separation}"
                ));
            }
            let input_numel: usize = self.model.input_shape.iter().product();
            if input_numel != *dim {
                bad.push(format!(
                    "model.input_shape {:?} holds {input_numel} values but dataset.dim is {dim}",
                    self.model.input_shape
                ));
            }
        }
        match &self.dataset {
            DatasetConfig::ImageRaw {
                channels,
                height,
                width,
                downsample,
                ..
            } => {
                if *channels == 0 || *height == 0 || *width == 0 {
                    bad.push("dataset channels/height/width must be >= 1".into());
                }
                let d = downsample.unwrap_or(1);
                if d == 0 {
                    bad.push("dataset.downsample must be >= 1".into());
                } else {
                    if height % d != 0 || width % d != 0 {
                        bad.push(format!(
                            "downsample {d} must divide height {height} and width {width}"
                        ));
                    }
                    let expect = vec![*channels, height / d, width / d];
                    if self.model.input_shape != expect {
                        bad.push(format!(
                            "model.input_shape {:?} must equal the loaded image shape {:?}",
                            self.model.input_shape, expect
                        ));
                    }
                }
            }
            DatasetConfig::ImagePng { downsample, .. } => {
                // PNG dimensions come from the files; only the factor is
                // checkable up front.
                if downsample == &Some(0) {
                    bad.push("dataset.downsample must be >= 1".into());
                }
            }
            DatasetConfig::Synthetic { .. } => {}
        }

        if self.stream.classes_per_task == 0 {
            bad.push("stream.classes_per_task must be >= 1".into());
        }

        if self.model.planned_total_classes == 0 {
            bad.push("model.planned_total_classes must be >= 1".into());
        }

        // Class-dependent checks need the class count, known up front only
        // for synthetic data; image runs recheck at load time via
        // [`RunConfig::validate_for_classes`].
        if let Some(classes) = self.dataset.num_classes() {
            self.class_checks(classes, &mut bad);
        }

        if bad.is_empty() {
            Ok(())
        } else {
            Err(PstError::Config(bad.join("; ")))
        }
    }

    /// The checks that need the dataset's class count; called again after
    /// loading datasets whose class count is discovered on disk.
    pub fn validate_for_classes(&self, classes: usize) -> Result<()> {
        let mut bad = Vec::new();
        self.class_checks(classes, &mut bad);
        if bad.is_empty() {
            Ok(())
        } else {
            Err(PstError::Config(bad.join("; ")))
        }
    }

    fn class_checks(&self, classes: usize, bad: &mut Vec<String>) {
        if self.stream.classes_per_task > classes && classes > 0 {
            bad.push(format!(
                "stream.classes_per_task {} exceeds the {} dataset classes",
                self.stream.classes_per_task, classes
            ));
        }
        let rows = classifier_rows(self.model.planned_total_classes);
        if classes > rows {
            bad.push(format!(
                "{} classes will not fit the classifier's {} rows \
                 (planned_total_classes {})",
                classes, rows, self.model.planned_total_classes
            ));
        }
        if self.train.memory_budget > 0 && self.train.memory_budget < classes {
            bad.push(format!(
                "train.memory_budget {} is under one example per class \
                 ({classes} classes); use 0 to disable memory",
                self.train.memory_budget
            ));
        }
        if classes > 0 && self.stream.classes_per_task > 0 {
            self.validate_beta(classes, bad);
        }
    }

    /// Freeze-fraction feasibility: the per-task fractions must sum to at
    /// most 1, and the rounded per-layer unit quotas must fit each layer.
    fn validate_beta(&self, classes: usize, bad: &mut Vec<String>) {
        let counts = self.task_class_counts(classes);
        let betas: Option<Vec<f64>> = match &self.train.beta {
            None => Some(
                counts
                    .iter()
                    .map(|&c| c as f64 / self.model.planned_total_classes as f64)
                    .collect(),
            ),
            Some(BetaSchedule::Scalar(b)) => {
                if !(b.is_finite() && *b > 0.0 && *b <= 1.0) {
                    bad.push(format!("train.beta must be in (0, 1], got {b}"));
                    None
                } else {
                    Some(vec![*b; counts.len()])
                }
            }
            Some(BetaSchedule::PerTask(bs)) => {
                if bs.len() != counts.len() {
                    bad.push(format!(
                        "train.beta lists {} entries for a {}-task stream",
                        bs.len(),
                        counts.len()
                    ));
                    None
                } else if let Some(b) = bs
                    .iter()
                    .find(|b| !(b.is_finite() && **b > 0.0 && **b <= 1.0))
                {
                    bad.push(format!("train.beta entries must be in (0, 1], got {b}"));
                    None
                } else {
                    Some(bs.clone())
                }
            }
        };
        let Some(betas) = betas else { return };

        let total: f64 = betas.iter().sum();
        if total > 1.0 + 1e-9 {
            bad.push(format!(
                "train.beta sums to {total:.4} over the stream; must be <= 1"
            ));
        }
        // Rounded quotas must leave room in every freezable layer: the last
        // task can still find round(beta·units) free units.
        let mut widths: Vec<(String, usize)> = Vec::new();
        for (i, &c) in self.model.conv_channels.iter().enumerate() {
            widths.push((format!("conv layer {i} ({c} filters)"), c));
        }
        for (i, &u) in self.model.dense_units.iter().enumerate() {
            widths.push((format!("dense layer {i} ({u} neurons)"), u));
        }
        for (label, units) in widths {
            let need: usize = betas
                .iter()
                .map(|b| (b * units as f64).round() as usize)
                .sum();
            if need > units {
                bad.push(format!(
                    "freeze quotas need {need} of the {units} units in {label}; \
                     lower beta or widen the layer"
                ));
            }
        }
    }

    pub fn train_params(&self) -> TrainParams {
        TrainParams {
            epochs: self.train.epochs,
            reinforce_epochs: self.train.reinforce_epochs,
            batch_size: self.train.batch_size,
            base_lr: self.train.lr,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            mix: MixSchedule {
                head: self.train.mix_head,
                period: self.train.mix_period,
                tail: self.train.mix_tail,
            },
            beta: self.train.beta.clone(),
        }
    }

    /// Materializes the dataset. Image data is split 80/20 by a hash of the
    /// example id — the same stable rule the synthesizer uses.
    pub fn build_data(&self) -> Result<SplitDataset> {
        match &self.dataset {
            DatasetConfig::Synthetic {
                classes,
                dim,
                per_class,
                separation,
                seed,
            } => synth_gaussians(*classes, *dim, *per_class, *separation, *seed),
            DatasetConfig::ImageRaw {
                path,
                channels,
                height,
                width,
                downsample,
                normalize,
            } => {
                let (data, _) = load_image_dataset(
                    path,
                    &ImageFormat::RawBatches {
                        channels: *channels,
                        height: *height,
                        width: *width,
                    },
                    downsample.unwrap_or(1),
                    normalize.clone(),
                )?;
                Ok(split_by_id(data))
            }
            DatasetConfig::ImagePng {
                path,
                downsample,
                normalize,
            } => {
                let (data, _) =
                    load_image_dataset(path, &ImageFormat::PngDir, downsample.unwrap_or(1), normalize.clone())?;
                Ok(split_by_id(data))
            }
        }
    }

    /// Builds the task stream for one run seed (the seed shuffles the class
    /// order, as seed-averaged protocols prescribe).
    pub fn build_stream(&self, data: &SplitDataset, run_seed: u64) -> Result<TaskStream> {
        make_stream(data, self.stream.classes_per_task, run_seed)
    }
}

fn split_by_id(data: LabeledDataset) -> SplitDataset {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for e in data.examples {
        if splitmix64(e.id) % 5 == 0 {
            test.push(e);
        } else {
            train.push(e);
        }
    }
    SplitDataset {
        train: LabeledDataset { examples: train },
        test: LabeledDataset { examples: test },
    }
}
