//! Python bindings for the continual-learning engine.
//!
//! Exposes the experiment loop at two levels:
//!
//! * [`Experiment`] — an in-process run: construct from a TOML config and a
//!   seed, advance task by task, inspect per-epoch records and per-task
//!   summaries as dictionaries.
//! * Module functions `run` / `report` / `plot` / `validate_config` — the
//!   same operations the CLI offers, returning paths and rendered text.
//!
//! Configuration and parse problems raise `ValueError`; everything else
//! raises `RuntimeError`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use std::path::{Path, PathBuf};

use pst_core::commands::{cmd_plot, cmd_report, cmd_run};
use pst_core::config::RunConfig;
use pst_core::data::{SplitDataset, TaskStream};
use pst_core::error::PstError;
use pst_core::plot::PlotKind;
use pst_core::strategy::{advance_one_task, new_run, RunState};
use pst_core::trainer::{EpochRecord, TaskSummary, TrainParams};

fn to_py_err(e: PstError) -> PyErr {
    match e {
        PstError::Config(_) | PstError::Parse { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn record_dict<'py>(py: Python<'py>, r: &EpochRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("task", r.task)?;
    d.set_item("stage", r.stage.to_string())?;
    d.set_item("epoch", r.epoch)?;
    d.set_item("phase", r.phase.to_string())?;
    d.set_item("lr", r.lr)?;
    d.set_item("train_loss", r.train_loss)?;
    d.set_item("steps", r.steps)?;
    d.set_item("fwd_flops", r.fwd_flops)?;
    d.set_item("bwd_flops", r.bwd_flops)?;
    d.set_item("upd_flops", r.upd_flops)?;
    d.set_item("free_elements", r.free_elements)?;
    d.set_item("total_elements", r.total_elements)?;
    d.set_item("per_task_acc", r.per_task_acc.clone())?;
    d.set_item("overall_acc", r.overall_acc)?;
    Ok(d)
}

fn summary_dict<'py>(py: Python<'py>, s: &TaskSummary) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("task", s.task)?;
    d.set_item("classes", s.classes.clone())?;
    d.set_item("per_task_acc", s.per_task_acc.clone())?;
    d.set_item("multi_head_acc", s.multi_head_acc.clone())?;
    d.set_item("forgetting", s.forgetting.clone())?;
    d.set_item("overall_acc", s.overall_acc)?;
    let flops = PyDict::new(py);
    flops.set_item("fwd", s.flops.fwd)?;
    flops.set_item("bwd", s.flops.bwd)?;
    flops.set_item("upd", s.flops.upd)?;
    d.set_item("flops", flops)?;
    d.set_item("frozen_elements", s.frozen_elements)?;
    d.set_item("total_elements", s.total_elements)?;
    Ok(d)
}

/// One in-process experiment: a network learning a task stream under a
/// strategy, driven task by task from Python.
#[pyclass]
pub struct Experiment {
    cfg: RunConfig,
    params: TrainParams,
    data: SplitDataset,
    stream: TaskStream,
    state: RunState,
}

#[pymethods]
impl Experiment {
    /// Build from a TOML config string and a seed (the seed shuffles the
    /// class order, seeds the weights, and drives every random choice).
    #[new]
    pub fn new(config_toml: &str, seed: u64) -> PyResult<Self> {
        let cfg = RunConfig::from_toml(config_toml).map_err(to_py_err)?;
        let data = cfg.build_data().map_err(to_py_err)?;
        cfg.validate_for_classes(data.train.classes().len())
            .map_err(to_py_err)?;
        let stream = cfg.build_stream(&data, seed).map_err(to_py_err)?;
        let state = new_run(&cfg.model, cfg.run.strategy, cfg.train.memory_budget, seed)
            .map_err(to_py_err)?;
        let params = cfg.train_params();
        Ok(Experiment {
            cfg,
            params,
            data,
            stream,
            state,
        })
    }

    #[getter]
    pub fn strategy(&self) -> String {
        self.state.strategy.name().to_string()
    }

    #[getter]
    pub fn seed(&self) -> u64 {
        self.state.seed
    }

    #[getter]
    pub fn completed_tasks(&self) -> usize {
        self.state.completed_tasks
    }

    #[getter]
    pub fn total_tasks(&self) -> usize {
        self.stream.tasks.len()
    }

    /// Train the next task to completion (including segmentation,
    /// reinforcement, and freezing); returns its summary dict.
    pub fn advance_task<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let (state, stream, params) = (&mut self.state, &self.stream, &self.params);
        py.detach(|| advance_one_task(state, stream, params))
            .map_err(to_py_err)?;
        summary_dict(
            py,
            self.state
                .summaries
                .last()
                .expect("a finished task leaves a summary"),
        )
    }

    /// Train every remaining task; returns all summaries.
    pub fn run_all<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        while self.state.completed_tasks < self.stream.tasks.len() {
            self.advance_task(py)?;
        }
        self.summaries(py)
    }

    /// Per-epoch records so far, as dicts.
    pub fn records<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        let items: Vec<Bound<'py, PyDict>> = self
            .state
            .records
            .iter()
            .map(|r| record_dict(py, r))
            .collect::<PyResult<_>>()?;
        PyList::new(py, items)
    }

    /// Per-task summaries so far, as dicts.
    pub fn summaries<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        let items: Vec<Bound<'py, PyDict>> = self
            .state
            .summaries
            .iter()
            .map(|s| summary_dict(py, s))
            .collect::<PyResult<_>>()?;
        PyList::new(py, items)
    }

    /// Overall single-head accuracy after the last finished task.
    pub fn overall_accuracy(&self) -> Option<f64> {
        self.state.summaries.last().map(|s| s.overall_acc)
    }

    /// The complete run state (network, freeze map, memory, RNG streams)
    /// as JSON — two runs with the same config and seed serialize
    /// identically, byte for byte.
    pub fn state_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.state)
            .map_err(|e| PyRuntimeError::new_err(format!("state serialize: {e}")))
    }

    fn __repr__(&self) -> String {
        format!(
            "Experiment(strategy={}, seed={}, tasks={}/{})",
            self.state.strategy.name(),
            self.state.seed,
            self.state.completed_tasks,
            self.stream.tasks.len()
        )
    }

    /// Number of training examples the stream holds (handy sanity check).
    pub fn train_examples(&self) -> usize {
        self.data.train.len()
    }

    /// The resolved configuration (defaults filled in) as TOML.
    pub fn config_toml(&self) -> PyResult<String> {
        self.cfg.to_toml().map_err(to_py_err)
    }
}

/// Parse and validate a TOML config; raises ValueError listing every
/// violated field.
#[pyfunction]
pub fn validate_config(config_toml: &str) -> PyResult<()> {
    RunConfig::from_toml(config_toml)
        .map(|_| ())
        .map_err(to_py_err)
}

/// Run every seed of a config file; returns the run directory. Equivalent
/// to `pst run --config <path> [--out <out>] [--resume]`.
#[pyfunction]
#[pyo3(signature = (config_path, out=None, resume=false))]
pub fn run(
    py: Python<'_>,
    config_path: PathBuf,
    out: Option<PathBuf>,
    resume: bool,
) -> PyResult<String> {
    let dir = py
        .detach(|| cmd_run(&config_path, out.as_deref(), resume))
        .map_err(to_py_err)?;
    Ok(dir.display().to_string())
}

/// Compare finished runs; returns (text_table, csv). Equivalent to
/// `pst report <runs...> [--baseline <name>]`.
#[pyfunction]
#[pyo3(signature = (paths, baseline=None))]
pub fn report(paths: Vec<PathBuf>, baseline: Option<String>) -> PyResult<(String, String)> {
    let r = cmd_report(&paths, baseline.as_deref()).map_err(to_py_err)?;
    Ok((r.text, r.csv))
}

/// Render one chart of a run; returns the SVG text. Equivalent to
/// `pst plot --kind <kind> <path>`.
#[pyfunction]
pub fn plot(path: PathBuf, kind: &str) -> PyResult<String> {
    let kind = PlotKind::parse(kind).map_err(to_py_err)?;
    cmd_plot(Path::new(&path), kind).map_err(to_py_err)
}

#[pymodule]
fn pst_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Experiment>()?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(plot, m)?)?;
    Ok(())
}
