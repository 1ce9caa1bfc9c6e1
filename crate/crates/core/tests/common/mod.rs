//! Shared fixtures for the acceptance suite: finite-difference oracles,
//! synthetic stream builders, strategy runners, and rank statistics.
#![allow(dead_code)]

use pst_core::data::{make_stream, synth_gaussians, TaskStream};
use pst_core::model::ModelSpec;
use pst_core::rehearsal::MixSchedule;
use pst_core::strategy::{new_run, run_all, RunState, Strategy};
use pst_core::trainer::{BetaSchedule, TrainParams};

/// Central difference `df/d at[i]` with step `h`, one coordinate at a time.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; at.len()];
    let mut probe = at.to_vec();
    for i in 0..at.len() {
        probe[i] = at[i] + h;
        let up = f(&probe);
        probe[i] = at[i] - h;
        let down = f(&probe);
        probe[i] = at[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest elementwise relative error; the denominator is floored at 1 so
/// near-zero entries are compared absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

/// Dense-only model: `input -> hidden... -> classifier(planned classes)`.
pub fn dense_spec(input: usize, hidden: &[usize], planned: usize) -> ModelSpec {
    ModelSpec {
        input_shape: vec![input],
        conv_channels: vec![],
        kernel: 3,
        pool: 1,
        dense_units: hidden.to_vec(),
        planned_total_classes: planned,
    }
}

/// Training knobs with the usual SGD constants; `mix` is (head, period, tail).
pub fn train_params(
    epochs: usize,
    reinforce: usize,
    batch: usize,
    mix: (usize, usize, usize),
    beta: Option<BetaSchedule>,
) -> TrainParams {
    TrainParams {
        epochs,
        reinforce_epochs: reinforce,
        batch_size: batch,
        base_lr: 0.1,
        momentum: 0.9,
        weight_decay: 5e-4,
        mix: MixSchedule {
            head: mix.0,
            period: mix.1,
            tail: mix.2,
        },
        beta,
    }
}

/// Class-incremental stream over Gaussian blobs whose means sit at radius
/// `separation` (unit noise), split into tasks of `classes_per_task`.
pub fn gaussian_stream(
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    data_seed: u64,
    classes_per_task: usize,
    stream_seed: u64,
) -> TaskStream {
    let data = synth_gaussians(classes, dim, per_class, separation, data_seed).unwrap();
    make_stream(&data, classes_per_task, stream_seed).unwrap()
}

/// Fresh run driven through the whole stream.
pub fn run_through(
    strategy: Strategy,
    spec: &ModelSpec,
    stream: &TaskStream,
    params: &TrainParams,
    budget: usize,
    seed: u64,
) -> RunState {
    let mut state = new_run(spec, strategy, budget, seed).unwrap();
    run_all(&mut state, stream, params).unwrap();
    state
}

/// Single-head accuracy over all seen classes after the final task.
pub fn final_overall(state: &RunState) -> f64 {
    state.summaries.last().unwrap().overall_acc
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Spearman rank correlation, with tied values sharing their average rank.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> f64 {
    pearson(&average_ranks(xs), &average_ranks(ys))
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = shared;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    cov / (va.sqrt() * vb.sqrt())
}
