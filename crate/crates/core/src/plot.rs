//! Self-contained SVG line charts over run metrics.
//!
//! Four chart kinds cover the standard questions about a run:
//!
//! * `learning_curve` — per-epoch overall accuracy, with every training
//!   phase boundary (task start, reinforcement start, classifier tail)
//!   marked by a labeled vertical line.
//! * `first_task` — the first task's accuracy at every task boundary, the
//!   canonical forgetting picture.
//! * `overall` — overall single-head accuracy per task boundary.
//! * `flops` — per-task forward/backward/update FLOPs on a log axis.
//!
//! Charts draw one thin line per seed plus a bold seed-mean line. The
//! output is a single `<svg>` element with inline styling only — no
//! scripts, fonts, or external references — so the file renders anywhere.

use crate::error::{PstError, Result};
use crate::metrics::{MetricsRow, SummaryRow};
use crate::rehearsal::EpochPhase;
use crate::trainer::Stage;

/// Chart kinds the plotter can render.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    LearningCurve,
    FirstTask,
    Overall,
    Flops,
}

impl PlotKind {
    pub const ALL: [PlotKind; 4] = [
        PlotKind::LearningCurve,
        PlotKind::FirstTask,
        PlotKind::Overall,
        PlotKind::Flops,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PlotKind::LearningCurve => "learning_curve",
            PlotKind::FirstTask => "first_task",
            PlotKind::Overall => "overall",
            PlotKind::Flops => "flops",
        }
    }

    pub fn parse(s: &str) -> Result<PlotKind> {
        PlotKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                PstError::Config(format!(
                    "unknown plot kind {s:?}; expected one of {}",
                    PlotKind::ALL
                        .iter()
                        .map(|k| k.name())
                        .collect::<Vec<_>>()
                        .join(", ")
                ))
            })
    }
}

impl std::fmt::Display for PlotKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

// ---------------------------------------------------------------------------
// Generic chart model
// ---------------------------------------------------------------------------

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
    color: String,
    width: f64,
    opacity: f64,
    /// Thin per-seed lines stay out of the legend.
    in_legend: bool,
}

struct VLine {
    x: f64,
    label: String,
}

struct Chart {
    title: String,
    x_label: String,
    y_label: String,
    series: Vec<Series>,
    vlines: Vec<VLine>,
    /// Fixed y range (accuracy charts pin to [0, 1]).
    y_range: Option<(f64, f64)>,
    /// Log₁₀ y axis; every y value must be positive.
    log_y: bool,
    /// Force integer x ticks (task/epoch axes).
    int_x: bool,
}

const W: f64 = 880.0;
const H: f64 = 500.0;
const ML: f64 = 72.0; // left margin (y tick labels)
const MR: f64 = 200.0; // right margin (legend)
const MT: f64 = 46.0; // top margin (title)
const MB: f64 = 56.0; // bottom margin (x label)

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Tick positions with a 1/2/5·10^k step covering [lo, hi].
fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let raw = span / target.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= target as f64)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * span {
        // Snap near-zero ticks so labels read "0", not "-0.0000000001".
        out.push(if t.abs() < step * 1e-6 { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(0.001..100_000.0).contains(&a) {
        return format!("{v:e}");
    }
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

impl Chart {
    fn svg(&self) -> Result<String> {
        if self.series.iter().all(|s| s.points.is_empty()) {
            return Err(PstError::Contract(format!(
                "chart {:?} has no points to draw",
                self.title
            )));
        }
        let pts = || self.series.iter().flat_map(|s| s.points.iter());

        // Domains.
        let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
        for &(x, _) in pts() {
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
        for v in &self.vlines {
            x0 = x0.min(v.x);
            x1 = x1.max(v.x);
        }
        if x0 == x1 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        let ys: Vec<f64> = if self.log_y {
            let mut v = Vec::new();
            for &(_, y) in pts() {
                if !(y > 0.0) {
                    return Err(PstError::Contract(format!(
                        "log-scale chart {:?} received a non-positive value {y}",
                        self.title
                    )));
                }
                v.push(y.log10());
            }
            v
        } else {
            pts().map(|&(_, y)| y).collect()
        };
        let (mut y0, mut y1) = match (self.y_range, self.log_y) {
            (Some((a, b)), false) => (a, b),
            _ => {
                let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let pad = ((hi - lo) * 0.06).max(1e-9);
                (lo - pad, hi + pad)
            }
        };
        if y0 == y1 {
            y0 -= 0.5;
            y1 += 0.5;
        }

        let (pw, ph) = (W - ML - MR, H - MT - MB);
        let mx = |x: f64| ML + (x - x0) / (x1 - x0) * pw;
        let my = |y: f64| {
            let t = if self.log_y { y.log10() } else { y };
            MT + ph - (t - y0) / (y1 - y0) * ph
        };

        let mut svg = String::new();
        svg.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" \
             width=\"{W}\" height=\"{H}\" font-family=\"Helvetica, Arial, sans-serif\">\n"
        ));
        svg.push_str(&format!(
            "<rect width=\"{W}\" height=\"{H}\" fill=\"#ffffff\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"24\" font-size=\"16\" font-weight=\"bold\">{}</text>\n",
            ML,
            esc(&self.title)
        ));

        // Gridlines + ticks.
        let xticks = {
            let mut t = nice_ticks(x0, x1, 8);
            if self.int_x {
                t.retain(|v| (v - v.round()).abs() < 1e-9);
                t.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
            }
            t
        };
        let yticks: Vec<f64> = if self.log_y {
            let lo = y0.floor() as i64;
            let hi = y1.ceil() as i64;
            let stride = (((hi - lo) as usize).div_ceil(6)).max(1) as i64;
            (lo..=hi).step_by(stride as usize).map(|e| e as f64).collect()
        } else {
            nice_ticks(y0, y1, 6)
        };
        for &t in &xticks {
            let x = mx(t);
            svg.push_str(&format!(
                "<line x1=\"{x:.2}\" y1=\"{}\" x2=\"{x:.2}\" y2=\"{}\" stroke=\"#e0e0e0\"/>\n",
                MT,
                MT + ph
            ));
            svg.push_str(&format!(
                "<text x=\"{x:.2}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
                MT + ph + 18.0,
                fmt_tick(t)
            ));
        }
        for &t in &yticks {
            if !self.log_y && (t < y0 - 1e-9 || t > y1 + 1e-9) {
                continue;
            }
            let y = MT + ph - (t - y0) / (y1 - y0) * ph;
            svg.push_str(&format!(
                "<line x1=\"{}\" y1=\"{y:.2}\" x2=\"{}\" y2=\"{y:.2}\" stroke=\"#e0e0e0\"/>\n",
                ML,
                ML + pw
            ));
            let label = if self.log_y {
                format!("1e{}", t as i64)
            } else {
                fmt_tick(t)
            };
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\">{label}</text>\n",
                ML - 8.0,
                y + 4.0
            ));
        }

        // Phase annotations.
        for v in &self.vlines {
            let x = mx(v.x);
            svg.push_str(&format!(
                "<line x1=\"{x:.2}\" y1=\"{}\" x2=\"{x:.2}\" y2=\"{}\" stroke=\"#b0b0b0\" \
                 stroke-dasharray=\"4 3\"/>\n",
                MT,
                MT + ph
            ));
            svg.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" fill=\"#707070\" \
                 transform=\"rotate(-90 {:.2} {:.2})\" text-anchor=\"end\">{}</text>\n",
                x + 4.0,
                MT + 4.0,
                x + 4.0,
                MT + 4.0,
                esc(&v.label)
            ));
        }

        // Series.
        for s in &self.series {
            if s.points.is_empty() {
                continue;
            }
            let path: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", mx(x), my(y)))
                .collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"{}\" \
                 stroke-opacity=\"{}\" points=\"{}\"/>\n",
                s.color,
                s.width,
                s.opacity,
                path.join(" ")
            ));
            if s.points.len() == 1 {
                let (x, y) = s.points[0];
                svg.push_str(&format!(
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\"/>\n",
                    mx(x),
                    my(y),
                    s.color
                ));
            }
        }

        // Frame and axis labels.
        svg.push_str(&format!(
            "<rect x=\"{ML}\" y=\"{MT}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" \
             stroke=\"#404040\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            ML + pw / 2.0,
            H - 14.0,
            esc(&self.x_label)
        ));
        svg.push_str(&format!(
            "<text x=\"18\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\" \
             transform=\"rotate(-90 18 {:.2})\">{}</text>\n",
            MT + ph / 2.0,
            MT + ph / 2.0,
            esc(&self.y_label)
        ));

        // Legend.
        let mut ly = MT + 10.0;
        for s in self.series.iter().filter(|s| s.in_legend) {
            let lx = ML + pw + 14.0;
            svg.push_str(&format!(
                "<line x1=\"{lx}\" y1=\"{ly:.2}\" x2=\"{}\" y2=\"{ly:.2}\" stroke=\"{}\" \
                 stroke-width=\"{}\"/>\n",
                lx + 22.0,
                s.color,
                s.width
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{:.2}\" font-size=\"11\">{}</text>\n",
                lx + 28.0,
                ly + 4.0,
                esc(&s.label)
            ));
            ly += 18.0;
        }

        svg.push_str("</svg>\n");
        Ok(svg)
    }
}

// ---------------------------------------------------------------------------
// Helpers shared by the chart builders
// ---------------------------------------------------------------------------

/// Pointwise arithmetic mean over per-seed series (mean over the seeds that
/// have a point at each x position).
fn mean_series(per_seed: &[Vec<(f64, f64)>]) -> Vec<(f64, f64)> {
    let longest = per_seed.iter().map(|s| s.len()).max().unwrap_or(0);
    (0..longest)
        .map(|i| {
            let ys: Vec<f64> = per_seed.iter().filter_map(|s| s.get(i)).map(|p| p.1).collect();
            let x = per_seed
                .iter()
                .filter_map(|s| s.get(i))
                .map(|p| p.0)
                .next()
                .unwrap_or(i as f64);
            (x, ys.iter().sum::<f64>() / ys.len() as f64)
        })
        .collect()
}

fn one_run_only<'a, I: Iterator<Item = (&'a str, crate::strategy::Strategy)>>(
    mut idents: I,
    kind: PlotKind,
) -> Result<()> {
    let Some(first) = idents.next() else {
        return Ok(());
    };
    if idents.any(|i| i != first) {
        return Err(PstError::Contract(format!(
            "{kind} plots one run at a time; the metrics mix several (run, strategy) pairs"
        )));
    }
    Ok(())
}

fn seed_order(seeds: impl Iterator<Item = u64>) -> Vec<u64> {
    let mut v: Vec<u64> = seeds.collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn missing(kind: PlotKind, series: &str) -> PstError {
    PstError::Contract(format!(
        "{kind} plot needs the {series} series, which the metrics do not contain"
    ))
}

// ---------------------------------------------------------------------------
// Chart builders
// ---------------------------------------------------------------------------

/// Overall accuracy per epoch, phases annotated, one thin line per seed plus
/// the bold seed mean.
pub fn learning_curve_svg(rows: &[MetricsRow]) -> Result<String> {
    let kind = PlotKind::LearningCurve;
    if rows.is_empty() {
        return Err(missing(kind, "per-epoch overall_acc"));
    }
    one_run_only(rows.iter().map(|r| (r.run.as_str(), r.strategy)), kind)?;

    let seeds = seed_order(rows.iter().map(|r| r.seed));
    let per_seed: Vec<Vec<(f64, f64)>> = seeds
        .iter()
        .map(|&s| {
            rows.iter()
                .filter(|r| r.seed == s)
                .enumerate()
                .map(|(i, r)| (i as f64, r.record.overall_acc))
                .collect()
        })
        .collect();

    // Annotate from the first seed's chronology: task starts, the
    // reinforcement stage, and the classifier tail inside each stage.
    let mut vlines = Vec::new();
    {
        let first: Vec<&MetricsRow> = rows.iter().filter(|r| r.seed == seeds[0]).collect();
        let mut prev: Option<(usize, Stage, EpochPhase)> = None;
        for (i, r) in first.iter().enumerate() {
            let cur = (r.record.task, r.record.stage, r.record.phase);
            match prev {
                None => vlines.push(VLine {
                    x: i as f64,
                    label: format!("task {} train", cur.0),
                }),
                Some(p) => {
                    if cur.0 != p.0 {
                        vlines.push(VLine {
                            x: i as f64,
                            label: format!("task {} train", cur.0),
                        });
                    } else if cur.1 == Stage::Reinforce && p.1 == Stage::Train {
                        vlines.push(VLine {
                            x: i as f64,
                            label: format!("task {} segment+reinforce", cur.0),
                        });
                    } else if cur.2 == EpochPhase::ClassifierFinetune
                        && p.2 != EpochPhase::ClassifierFinetune
                    {
                        vlines.push(VLine {
                            x: i as f64,
                            label: format!("task {} classifier tail", cur.0),
                        });
                    }
                }
            }
            prev = Some(cur);
        }
    }

    let mut series: Vec<Series> = per_seed
        .iter()
        .zip(&seeds)
        .map(|(pts, s)| Series {
            label: format!("seed {s}"),
            points: pts.clone(),
            color: "#9db4c8".into(),
            width: 1.0,
            opacity: 0.6,
            in_legend: false,
        })
        .collect();
    series.push(Series {
        label: format!("mean of {} seeds", seeds.len()),
        points: mean_series(&per_seed),
        color: PALETTE[0].into(),
        width: 2.5,
        opacity: 1.0,
        in_legend: true,
    });

    Chart {
        title: format!(
            "{} — learning curve ({})",
            rows[0].run,
            rows[0].strategy.name()
        ),
        x_label: "epoch (cumulative across tasks)".into(),
        y_label: "overall single-head accuracy".into(),
        series,
        vlines,
        y_range: Some((0.0, 1.0)),
        log_y: false,
        int_x: true,
    }
    .svg()
}

fn task_axis_chart(
    rows: &[SummaryRow],
    kind: PlotKind,
    value: impl Fn(&SummaryRow) -> Option<f64>,
    series_name: &str,
    y_label: &str,
) -> Result<(Vec<Series>, String)> {
    if rows.is_empty() {
        return Err(missing(kind, series_name));
    }
    one_run_only(rows.iter().map(|r| (r.run.as_str(), r.strategy)), kind)?;
    let seeds = seed_order(rows.iter().map(|r| r.seed));
    let mut per_seed = Vec::new();
    for &s in &seeds {
        let mut pts = Vec::new();
        for r in rows.iter().filter(|r| r.seed == s) {
            match value(r) {
                Some(v) => pts.push((r.summary.task as f64, v)),
                None => return Err(missing(kind, series_name)),
            }
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        per_seed.push(pts);
    }
    let mut series: Vec<Series> = per_seed
        .iter()
        .zip(&seeds)
        .map(|(pts, s)| Series {
            label: format!("seed {s}"),
            points: pts.clone(),
            color: "#9db4c8".into(),
            width: 1.0,
            opacity: 0.6,
            in_legend: false,
        })
        .collect();
    series.push(Series {
        label: format!("{series_name} (mean of {} seeds)", seeds.len()),
        points: mean_series(&per_seed),
        color: PALETTE[0].into(),
        width: 2.5,
        opacity: 1.0,
        in_legend: true,
    });
    Ok((series, y_label.to_string()))
}

/// The first task's accuracy at every task boundary: single-head per seed
/// with its mean, plus the mean multi-head series for comparison.
pub fn first_task_svg(rows: &[SummaryRow]) -> Result<String> {
    let kind = PlotKind::FirstTask;
    let (mut series, y_label) = task_axis_chart(
        rows,
        kind,
        |r| r.summary.per_task_acc.first().copied(),
        "first-task single-head",
        "first-task accuracy",
    )?;
    // Multi-head mean on top (argmax restricted to the first task's classes).
    let seeds = seed_order(rows.iter().map(|r| r.seed));
    let mut per_seed = Vec::new();
    for &s in &seeds {
        let mut pts = Vec::new();
        for r in rows.iter().filter(|r| r.seed == s) {
            match r.summary.multi_head_acc.first() {
                Some(&v) => pts.push((r.summary.task as f64, v)),
                None => return Err(missing(kind, "first-task multi-head")),
            }
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        per_seed.push(pts);
    }
    series.push(Series {
        label: format!("first-task multi-head (mean of {} seeds)", seeds.len()),
        points: mean_series(&per_seed),
        color: PALETTE[1].into(),
        width: 2.5,
        opacity: 1.0,
        in_legend: true,
    });

    Chart {
        title: format!(
            "{} — first-task retention ({})",
            rows[0].run,
            rows[0].strategy.name()
        ),
        x_label: "tasks trained".into(),
        y_label,
        series,
        vlines: Vec::new(),
        y_range: Some((0.0, 1.0)),
        log_y: false,
        int_x: true,
    }
    .svg()
}

/// Overall single-head accuracy at every task boundary.
pub fn overall_svg(rows: &[SummaryRow]) -> Result<String> {
    let kind = PlotKind::Overall;
    let (series, y_label) = task_axis_chart(
        rows,
        kind,
        |r| Some(r.summary.overall_acc),
        "overall single-head",
        "overall accuracy",
    )?;
    Chart {
        title: format!(
            "{} — overall accuracy ({})",
            rows[0].run,
            rows[0].strategy.name()
        ),
        x_label: "tasks trained".into(),
        y_label,
        series,
        vlines: Vec::new(),
        y_range: Some((0.0, 1.0)),
        log_y: false,
        int_x: true,
    }
    .svg()
}

/// Per-task forward/backward/update FLOPs (seed means) on a log axis.
pub fn flops_svg(rows: &[SummaryRow]) -> Result<String> {
    let kind = PlotKind::Flops;
    if rows.is_empty() {
        return Err(missing(kind, "per-task FLOPs"));
    }
    one_run_only(rows.iter().map(|r| (r.run.as_str(), r.strategy)), kind)?;
    let seeds = seed_order(rows.iter().map(|r| r.seed));
    let mut series = Vec::new();
    let picks: [(&str, fn(&SummaryRow) -> u128); 3] = [
        ("forward", |r| r.summary.flops.fwd),
        ("backward", |r| r.summary.flops.bwd),
        ("weight update", |r| r.summary.flops.upd),
    ];
    for (i, (label, pick)) in picks.iter().enumerate() {
        let per_seed: Vec<Vec<(f64, f64)>> = seeds
            .iter()
            .map(|&s| {
                let mut pts: Vec<(f64, f64)> = rows
                    .iter()
                    .filter(|r| r.seed == s)
                    .map(|r| (r.summary.task as f64, pick(r) as f64))
                    .collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                pts
            })
            .collect();
        let mean = mean_series(&per_seed);
        if mean.iter().any(|&(_, y)| !(y > 0.0)) {
            return Err(missing(kind, label));
        }
        series.push(Series {
            label: format!("{label} (mean of {} seeds)", seeds.len()),
            points: mean,
            color: PALETTE[i].into(),
            width: 2.0,
            opacity: 1.0,
            in_legend: true,
        });
    }
    Chart {
        title: format!(
            "{} — training FLOPs per task ({})",
            rows[0].run,
            rows[0].strategy.name()
        ),
        x_label: "task".into(),
        y_label: "FLOPs (log scale)".into(),
        series,
        vlines: Vec::new(),
        y_range: None,
        log_y: true,
        int_x: true,
    }
    .svg()
}
