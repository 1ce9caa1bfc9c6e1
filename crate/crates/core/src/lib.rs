//! Single-network continual learning by progressive segmented training.
//!
//! A task stream arrives one task at a time; the network must learn each new
//! task without revisiting old ones and without growing extra sub-networks.
//! After training a task, the engine scores how much each unit (conv filter,
//! dense neuron) mattered for it, freezes the top fraction in place, re-derives
//! the rest from scratch for the next task, and keeps a small class-balanced
//! exemplar buffer for rehearsal. Frozen parameters are never touched again —
//! the forward pass still uses them, so earlier tasks keep their accuracy
//! while free capacity is reused.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`autodiff`] — a dense `f64` tensor and a tape-based
//!   reverse-mode differentiator covering conv/dense/batch-norm/softmax ops.
//! * [`model`] — the reference convnet, unit bookkeeping, weight init.
//! * [`segment`] — unit freeze states and per-element trainability masks.
//! * [`optim`] — SGD with momentum, weight decay, and mask-aware updates.
//! * [`data`] — task streams, synthetic Gaussian data, image loading.
//! * [`rehearsal`] — the exemplar buffer and the balanced-epoch schedule.

pub mod autodiff;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod flops;
pub mod importance;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod plot;
pub mod rehearsal;
pub mod segment;
pub mod strategy;
pub mod tensor;
pub mod trainer;

pub use error::{PstError, Result};
pub use tensor::Tensor;
