//! The three experiment commands: run, report, plot.
//!
//! `cmd_run` executes a config seed by seed, checkpointing after every task
//! so an interrupted run resumes exactly where it stopped — the checkpoint
//! carries the whole run state (network, freeze map, memory, RNG streams),
//! so a resumed run reproduces the uninterrupted one bit for bit. All
//! randomness derives from the config's seeds, so reruns are bit-identical
//! too.
//!
//! `cmd_report` compares finished runs (strategies as rows), and `cmd_plot`
//! renders one run's metrics as a self-contained SVG.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{PstError, Result};
use crate::metrics::{
    group_summaries, parse_metrics_csv, parse_summary_csv, RunMetrics, SeedMetrics,
    SCHEMA_VERSION,
};
use crate::plot::{first_task_svg, flops_svg, learning_curve_svg, overall_svg, PlotKind};
use crate::strategy::{advance_one_task, new_run, RunState, Strategy};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "PST_OUT_ROOT";

/// Output-root precedence: command-line flag, then the config's `out_root`,
/// then `$PST_OUT_ROOT`, then `./runs`.
pub fn out_root(flag: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    resolve_out_root(
        flag,
        cfg.run.out_root.as_deref(),
        std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from),
    )
}

fn resolve_out_root(
    flag: Option<&Path>,
    cfg_root: Option<&Path>,
    env_root: Option<PathBuf>,
) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg_root.map(Path::to_path_buf))
        .or(env_root)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// The files a finished run directory contains.
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: PathBuf) -> Self {
        RunPaths { dir }
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.csv")
    }
    pub fn aggregate(&self) -> PathBuf {
        self.dir.join("aggregate.csv")
    }
    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.dir.join(format!("seed-{seed}"))
    }
    /// Checkpoint written after `completed` tasks finished.
    pub fn checkpoint(&self, seed: u64, completed: usize) -> PathBuf {
        self.seed_dir(seed).join(format!("checkpoint-{completed}.json"))
    }
}

/// One on-disk checkpoint: the resolved config it was produced by plus the
/// complete run state. Resume refuses checkpoints from a different config.
#[derive(Serialize, Deserialize)]
pub struct CheckpointFile {
    pub config: RunConfig,
    pub state: RunState,
}

/// Highest finished-task checkpoint in a seed directory, if any.
fn latest_checkpoint(seed_dir: &Path) -> Result<Option<(usize, PathBuf)>> {
    if !seed_dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(seed_dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(num) = name
            .strip_prefix("checkpoint-")
            .and_then(|r| r.strip_suffix(".json"))
        {
            if let Ok(k) = num.parse::<usize>() {
                if best.as_ref().is_none_or(|(b, _)| k > *b) {
                    best = Some((k, path));
                }
            }
        }
    }
    Ok(best)
}

fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<RunState> {
    let text = fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| PstError::Parse {
        offset: e.column() as u64,
        msg: format!("checkpoint {}: {e}", path.display()),
    })?;
    if &file.config != cfg {
        return Err(PstError::Contract(format!(
            "checkpoint {} was written by a different config; \
             refusing to resume into it",
            path.display()
        )));
    }
    Ok(file.state)
}

fn write_checkpoint(path: &Path, cfg: &RunConfig, state: &RunState) -> Result<()> {
    // Serialize through a borrowing view to avoid cloning the whole state.
    #[derive(Serialize)]
    struct View<'a> {
        config: &'a RunConfig,
        state: &'a RunState,
    }
    let text = serde_json::to_string(&View { config: cfg, state })
        .map_err(|e| PstError::Contract(format!("checkpoint serialize: {e}")))?;
    fs::write(path, text)?;
    Ok(())
}

/// Runs every seed of the config to completion, writing the resolved config,
/// per-task checkpoints, and the three metrics files. With `resume`, seeds
/// continue from their latest checkpoint instead of starting over.
/// Returns the run directory.
pub fn cmd_run(config_path: &Path, out_flag: Option<&Path>, resume: bool) -> Result<PathBuf> {
    let cfg = RunConfig::load(config_path)?;
    let paths = RunPaths::new(out_root(out_flag, &cfg).join(&cfg.run.name));
    fs::create_dir_all(&paths.dir)?;
    fs::write(paths.config(), cfg.to_toml()?)?;

    let data = cfg.build_data()?;
    cfg.validate_for_classes(data.train.classes().len())?;
    let params = cfg.train_params();

    let mut metrics = RunMetrics {
        run: cfg.run.name.clone(),
        strategy: cfg.run.strategy,
        seeds: Vec::new(),
    };
    for &seed in &cfg.run.seeds {
        let stream = cfg.build_stream(&data, seed)?;
        fs::create_dir_all(paths.seed_dir(seed))?;
        let mut state = match latest_checkpoint(&paths.seed_dir(seed))? {
            Some((_, path)) if resume => load_checkpoint(&path, &cfg)?,
            _ => new_run(&cfg.model, cfg.run.strategy, cfg.train.memory_budget, seed)?,
        };
        while state.completed_tasks < stream.tasks.len() {
            advance_one_task(&mut state, &stream, &params)?;
            write_checkpoint(
                &paths.checkpoint(seed, state.completed_tasks),
                &cfg,
                &state,
            )?;
        }
        metrics.seeds.push(SeedMetrics {
            seed,
            records: state.records,
            summaries: state.summaries,
        });
    }

    fs::write(paths.metrics(), metrics.metrics_csv())?;
    fs::write(paths.summary(), metrics.summary_csv())?;
    fs::write(paths.aggregate(), metrics.aggregate_csv()?)?;
    Ok(paths.dir)
}

/// A run directory from any path inside it (or the directory itself).
fn run_dir_of(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().unwrap_or(Path::new(".")).to_path_buf()
    }
}

struct LoadedRun {
    dir: PathBuf,
    cfg: RunConfig,
    metrics: RunMetrics,
}

fn load_run(path: &Path) -> Result<LoadedRun> {
    let paths = RunPaths::new(run_dir_of(path));
    let cfg = RunConfig::load(&paths.config())?;
    let rows = parse_summary_csv(&fs::read_to_string(paths.summary())?)?;
    let mut runs = group_summaries(rows);
    if runs.len() != 1 {
        return Err(PstError::Contract(format!(
            "{} holds {} (run, strategy) pairs; expected exactly one",
            paths.summary().display(),
            runs.len()
        )));
    }
    Ok(LoadedRun {
        dir: paths.dir,
        cfg,
        metrics: runs.remove(0),
    })
}

/// Two runs are comparable when they saw the same data in the same stream
/// shape with the same model; strategy and training knobs may differ (that
/// is exactly what reports compare).
fn comparable(a: &RunConfig, b: &RunConfig) -> bool {
    a.dataset == b.dataset
        && a.stream == b.stream
        && a.model == b.model
        && a.run.seeds == b.run.seeds
}

/// The built report: a fixed-width text table and the same rows as CSV.
#[derive(Debug)]
pub struct Report {
    pub text: String,
    pub csv: String,
}

/// Compares runs: one row per run, overall accuracy after every task count,
/// the final-accuracy delta against the PST run (when present), and
/// weight-update / complete-path FLOPs ratios against the designated
/// baseline ("how many times cheaper is the baseline than this run" —
/// values above 1 mean this run is cheaper).
pub fn cmd_report(paths: &[PathBuf], baseline: Option<&str>) -> Result<Report> {
    if paths.is_empty() {
        return Err(PstError::Config("report needs at least one run".into()));
    }
    let runs: Vec<LoadedRun> = paths.iter().map(|p| load_run(p)).collect::<Result<_>>()?;
    for r in &runs[1..] {
        if !comparable(&runs[0].cfg, &r.cfg) {
            return Err(PstError::Contract(format!(
                "runs {} and {} use different dataset/stream/model/seed \
                 specifications; refusing to compare",
                runs[0].dir.display(),
                r.dir.display()
            )));
        }
    }

    let tasks = runs
        .iter()
        .map(|r| {
            r.metrics
                .seeds
                .first()
                .map(|s| s.summaries.len())
                .unwrap_or(0)
        })
        .max()
        .unwrap_or(0);
    if tasks == 0 {
        return Err(PstError::Contract("no task summaries to report".into()));
    }

    struct Row {
        name: String,
        strategy: Strategy,
        seeds: usize,
        acc: Vec<f64>, // seed-mean overall accuracy after task k
        upd: f64,      // seed-mean total weight-update FLOPs
        complete: f64, // seed-mean total fwd+bwd+upd FLOPs
    }
    let mut rows = Vec::new();
    for r in &runs {
        let agg = r.metrics.aggregate()?;
        if agg.len() != tasks {
            return Err(PstError::Contract(format!(
                "{} reports {} tasks, others report {tasks}; refusing to compare",
                r.dir.display(),
                agg.len()
            )));
        }
        rows.push(Row {
            name: r.metrics.run.clone(),
            strategy: r.metrics.strategy,
            seeds: r.metrics.seeds.len(),
            acc: agg.iter().map(|a| a.overall_acc).collect(),
            upd: agg.iter().map(|a| a.upd_flops).sum(),
            complete: agg
                .iter()
                .map(|a| a.fwd_flops + a.bwd_flops + a.upd_flops)
                .sum(),
        });
    }

    // Reference rows: PST for accuracy deltas, the designated baseline
    // (default: the finetune run, else the first run) for FLOPs ratios.
    let pst_final = rows
        .iter()
        .find(|r| r.strategy == Strategy::Pst)
        .map(|r| r.acc[tasks - 1]);
    let base_idx = match baseline {
        Some(name) => rows
            .iter()
            .position(|r| r.name == name || r.strategy.name() == name)
            .ok_or_else(|| {
                PstError::Config(format!("baseline {name:?} does not match any run"))
            })?,
        None => rows
            .iter()
            .position(|r| r.strategy == Strategy::Finetune)
            .unwrap_or(0),
    };
    let (base_upd, base_complete) = (rows[base_idx].upd, rows[base_idx].complete);
    let base_name = rows[base_idx].name.clone();

    // CSV form.
    let mut csv = String::from("schema,run,strategy,seeds");
    for k in 1..=tasks {
        csv.push_str(&format!(",overall_acc_after_{k}_tasks"));
    }
    csv.push_str(",delta_vs_pst,upd_flops_ratio_vs_baseline,complete_flops_ratio_vs_baseline\n");
    for r in &rows {
        csv.push_str(&format!("{SCHEMA_VERSION},{},{},{}", r.name, r.strategy.name(), r.seeds));
        for a in &r.acc {
            csv.push_str(&format!(",{a}"));
        }
        match pst_final {
            Some(p) => csv.push_str(&format!(",{}", r.acc[tasks - 1] - p)),
            None => csv.push(','),
        }
        csv.push_str(&format!(",{},{}\n", base_upd / r.upd, base_complete / r.complete));
    }

    // Text form.
    let mut header = vec!["run".to_string(), "strategy".into(), "seeds".into()];
    for k in 1..=tasks {
        header.push(format!("acc@{k}"));
    }
    header.push("Δ vs pst".into());
    header.push("upd×".into());
    header.push("total×".into());
    let mut body: Vec<Vec<String>> = Vec::new();
    for r in &rows {
        let mut line = vec![r.name.clone(), r.strategy.name().into(), r.seeds.to_string()];
        for a in &r.acc {
            line.push(format!("{:.4}", a));
        }
        line.push(match pst_final {
            Some(p) => format!("{:+.4}", r.acc[tasks - 1] - p),
            None => "-".into(),
        });
        line.push(format!("{:.2}", base_upd / r.upd));
        line.push(format!("{:.2}", base_complete / r.complete));
        body.push(line);
    }
    let widths: Vec<usize> = header
        .iter()
        .enumerate()
        .map(|(i, h)| {
            body.iter()
                .map(|l| l[i].chars().count())
                .chain([h.chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let fmt_line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>width$}", width = w))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut text = fmt_line(&header);
    text.push('\n');
    text.push_str(&"-".repeat(text.len() - 1));
    text.push('\n');
    for l in &body {
        text.push_str(&fmt_line(l));
        text.push('\n');
    }
    text.push_str(&format!(
        "FLOPs ratios are {base_name} ÷ row (above 1 = cheaper than the baseline); \
         accuracies are means over seeds.\n"
    ));

    Ok(Report { text, csv })
}

/// Renders one chart of a run. `path` may be the run directory, its
/// `metrics.csv`, or its `summary.csv`; the kind picks the file it needs.
/// Returns the SVG text.
pub fn cmd_plot(path: &Path, kind: PlotKind) -> Result<String> {
    let paths = RunPaths::new(run_dir_of(path));
    let want = match kind {
        PlotKind::LearningCurve => paths.metrics(),
        _ => paths.summary(),
    };
    let text = fs::read_to_string(&want).map_err(|e| {
        PstError::Contract(format!(
            "{kind} plot needs the {} series from {}: {e}",
            match kind {
                PlotKind::LearningCurve => "per-epoch",
                _ => "per-task summary",
            },
            want.display()
        ))
    })?;
    match kind {
        PlotKind::LearningCurve => learning_curve_svg(&parse_metrics_csv(&text)?),
        PlotKind::FirstTask => first_task_svg(&parse_summary_csv(&text)?),
        PlotKind::Overall => overall_svg(&parse_summary_csv(&text)?),
        PlotKind::Flops => flops_svg(&parse_summary_csv(&text)?),
    }
}

/// Default output path for a plot: `plot-<kind>.svg` inside the run dir.
pub fn default_plot_path(input: &Path, kind: PlotKind) -> PathBuf {
    run_dir_of(input).join(format!("plot-{kind}.svg"))
}
