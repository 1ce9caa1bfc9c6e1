//! Persisted run metrics: schema-versioned CSV emission and parsing.
//!
//! Three files describe a run, all sharing one schema version carried in
//! the single header line and repeated in every row's first field:
//!
//! * `metrics.csv` — one row per (seed, task, stage, epoch).
//! * `summary.csv` — one row per (seed, task): end-of-task evaluation.
//! * `aggregate.csv` — one row per task: arithmetic mean over seeds.
//!
//! Floats are written with Rust's shortest round-trip formatting and read
//! back with `str::parse`, so emit → parse → emit is byte-stable; list
//! fields (per-task accuracy vectors and the like) join their entries with
//! `';'` inside one CSV cell.

use serde::{Deserialize, Serialize};

use crate::error::{PstError, Result};
use crate::strategy::Strategy;
use crate::trainer::{EpochRecord, TaskSummary};

/// Bumped whenever any column list changes.
pub const SCHEMA_VERSION: u32 = 1;

pub const METRICS_HEADER: &str = "schema,run,seed,strategy,task,stage,epoch,phase,lr,train_loss,\
     steps,fwd_flops,bwd_flops,upd_flops,free_elements,total_elements,per_task_acc,overall_acc";
pub const SUMMARY_HEADER: &str = "schema,run,seed,strategy,task,classes,per_task_acc,\
     multi_head_acc,forgetting,overall_acc,fwd_flops,bwd_flops,upd_flops,frozen_elements,\
     total_elements";
pub const AGGREGATE_HEADER: &str = "schema,run,strategy,seeds,task,overall_acc,first_task_acc,\
     first_task_multi_head,mean_forgetting,fwd_flops,bwd_flops,upd_flops,frozen_elements,\
     total_elements";

/// Everything one seed of a run produced.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SeedMetrics {
    pub seed: u64,
    pub records: Vec<EpochRecord>,
    pub summaries: Vec<TaskSummary>,
}

/// A whole run: every seed's records plus enough identity to label rows.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunMetrics {
    pub run: String,
    pub strategy: Strategy,
    pub seeds: Vec<SeedMetrics>,
}

/// One parsed `metrics.csv` row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run: String,
    pub seed: u64,
    pub strategy: Strategy,
    pub record: EpochRecord,
}

/// One parsed `summary.csv` row.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub run: String,
    pub seed: u64,
    pub strategy: Strategy,
    pub summary: TaskSummary,
}

/// Per-task arithmetic mean over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub task: usize,
    pub seeds: usize,
    pub overall_acc: f64,
    /// Mean single-head accuracy of the stream's first task at this point.
    pub first_task_acc: f64,
    /// Mean multi-head accuracy of the first task (its own classes only).
    pub first_task_multi_head: f64,
    /// Mean over seeds of the mean forgetting across previous tasks.
    pub mean_forgetting: f64,
    pub fwd_flops: f64,
    pub bwd_flops: f64,
    pub upd_flops: f64,
    pub frozen_elements: f64,
    pub total_elements: f64,
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

impl RunMetrics {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for seed in &self.seeds {
            for r in &seed.records {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    SCHEMA_VERSION,
                    self.run,
                    seed.seed,
                    self.strategy.name(),
                    r.task,
                    r.stage,
                    r.epoch,
                    r.phase,
                    r.lr,
                    r.train_loss,
                    r.steps,
                    r.fwd_flops,
                    r.bwd_flops,
                    r.upd_flops,
                    r.free_elements,
                    r.total_elements,
                    join(&r.per_task_acc),
                    r.overall_acc,
                ));
            }
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(SUMMARY_HEADER);
        out.push('\n');
        for seed in &self.seeds {
            for s in &seed.summaries {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    SCHEMA_VERSION,
                    self.run,
                    seed.seed,
                    self.strategy.name(),
                    s.task,
                    join(&s.classes),
                    join(&s.per_task_acc),
                    join(&s.multi_head_acc),
                    join(&s.forgetting),
                    s.overall_acc,
                    s.flops.fwd,
                    s.flops.bwd,
                    s.flops.upd,
                    s.frozen_elements,
                    s.total_elements,
                ));
            }
        }
        out
    }

    /// Mean over seeds, one row per task. Errors unless every seed reports
    /// the same task count (partial seeds are not comparable).
    pub fn aggregate(&self) -> Result<Vec<AggregateRow>> {
        let Some(first) = self.seeds.first() else {
            return Ok(Vec::new());
        };
        let tasks = first.summaries.len();
        for s in &self.seeds {
            if s.summaries.len() != tasks {
                return Err(PstError::Contract(format!(
                    "seed {} reports {} task summaries, seed {} reports {}",
                    first.seed,
                    tasks,
                    s.seed,
                    s.summaries.len()
                )));
            }
        }
        let n = self.seeds.len() as f64;
        let mut rows = Vec::with_capacity(tasks);
        for t in 0..tasks {
            let mut row = AggregateRow {
                task: t,
                seeds: self.seeds.len(),
                overall_acc: 0.0,
                first_task_acc: 0.0,
                first_task_multi_head: 0.0,
                mean_forgetting: 0.0,
                fwd_flops: 0.0,
                bwd_flops: 0.0,
                upd_flops: 0.0,
                frozen_elements: 0.0,
                total_elements: 0.0,
            };
            for seed in &self.seeds {
                let s = &seed.summaries[t];
                row.overall_acc += s.overall_acc / n;
                row.first_task_acc += s.per_task_acc.first().copied().unwrap_or(0.0) / n;
                row.first_task_multi_head +=
                    s.multi_head_acc.first().copied().unwrap_or(0.0) / n;
                let prior = &s.forgetting[..s.forgetting.len().saturating_sub(1)];
                if !prior.is_empty() {
                    row.mean_forgetting +=
                        prior.iter().sum::<f64>() / prior.len() as f64 / n;
                }
                row.fwd_flops += s.flops.fwd as f64 / n;
                row.bwd_flops += s.flops.bwd as f64 / n;
                row.upd_flops += s.flops.upd as f64 / n;
                row.frozen_elements += s.frozen_elements as f64 / n;
                row.total_elements += s.total_elements as f64 / n;
            }
            rows.push(row);
        }
        Ok(rows)
    }

    pub fn aggregate_csv(&self) -> Result<String> {
        let mut out = String::from(AGGREGATE_HEADER);
        out.push('\n');
        for r in self.aggregate()? {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                SCHEMA_VERSION,
                self.run,
                self.strategy.name(),
                r.seeds,
                r.task,
                r.overall_acc,
                r.first_task_acc,
                r.first_task_multi_head,
                r.mean_forgetting,
                r.fwd_flops,
                r.bwd_flops,
                r.upd_flops,
                r.frozen_elements,
                r.total_elements,
            ));
        }
        Ok(out)
    }
}

/// Validates the single header line, then returns every non-blank data line
/// with the byte offset where it starts (for honest parse errors).
fn data_lines<'a>(text: &'a str, header: &str, kind: &str) -> Result<Vec<(u64, &'a str)>> {
    let mut offset = 0u64;
    let mut lines = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        let (line, used) = match rest.find('\n') {
            Some(i) => (&rest[..i], i + 1),
            None => (rest, rest.len()),
        };
        lines.push((offset, line));
        offset += used as u64;
        rest = &rest[used..];
    }
    let Some((_, first)) = lines.first() else {
        return Err(PstError::Parse {
            offset: 0,
            msg: format!("empty file; expected a {kind} header line"),
        });
    };
    if first.trim_end() != header {
        return Err(PstError::Parse {
            offset: 0,
            msg: format!(
                "not a {kind} file (header line does not match schema v{SCHEMA_VERSION})"
            ),
        });
    }
    Ok(lines
        .into_iter()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .collect())
}

fn field_err(offset: u64, column: &str, err: impl std::fmt::Display) -> PstError {
    PstError::Parse {
        offset,
        msg: format!("column {column}: {err}"),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, offset: u64, column: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|x| x.parse::<T>().map_err(|e| field_err(offset, column, e)))
        .collect()
}

fn parse_one<T: std::str::FromStr>(s: &str, offset: u64, column: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| field_err(offset, column, e))
}

fn split_row<'a>(line: &'a str, want: usize, offset: u64) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = line.trim_end().split(',').collect();
    if fields.len() != want {
        return Err(PstError::Parse {
            offset,
            msg: format!("expected {want} columns, found {}", fields.len()),
        });
    }
    if fields[0] != SCHEMA_VERSION.to_string() {
        return Err(PstError::Parse {
            offset,
            msg: format!(
                "row schema version {:?} does not match v{SCHEMA_VERSION}",
                fields[0]
            ),
        });
    }
    Ok(fields)
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let lines = data_lines(text, METRICS_HEADER, "metrics")?;
    let mut out = Vec::with_capacity(lines.len());
    for (off, line) in lines {
        let f = split_row(line, 18, off)?;
        out.push(MetricsRow {
            run: f[1].to_string(),
            seed: parse_one(f[2], off, "seed")?,
            strategy: Strategy::parse(f[3])
                .map_err(|e| field_err(off, "strategy", e))?,
            record: EpochRecord {
                task: parse_one(f[4], off, "task")?,
                stage: parse_one(f[5], off, "stage")?,
                epoch: parse_one(f[6], off, "epoch")?,
                phase: parse_one(f[7], off, "phase")?,
                lr: parse_one(f[8], off, "lr")?,
                train_loss: parse_one(f[9], off, "train_loss")?,
                steps: parse_one(f[10], off, "steps")?,
                fwd_flops: parse_one(f[11], off, "fwd_flops")?,
                bwd_flops: parse_one(f[12], off, "bwd_flops")?,
                upd_flops: parse_one(f[13], off, "upd_flops")?,
                free_elements: parse_one(f[14], off, "free_elements")?,
                total_elements: parse_one(f[15], off, "total_elements")?,
                per_task_acc: parse_list(f[16], off, "per_task_acc")?,
                overall_acc: parse_one(f[17], off, "overall_acc")?,
            },
        });
    }
    Ok(out)
}

pub fn parse_summary_csv(text: &str) -> Result<Vec<SummaryRow>> {
    let lines = data_lines(text, SUMMARY_HEADER, "summary")?;
    let mut out = Vec::with_capacity(lines.len());
    for (off, line) in lines {
        let f = split_row(line, 15, off)?;
        out.push(SummaryRow {
            run: f[1].to_string(),
            seed: parse_one(f[2], off, "seed")?,
            strategy: Strategy::parse(f[3])
                .map_err(|e| field_err(off, "strategy", e))?,
            summary: TaskSummary {
                task: parse_one(f[4], off, "task")?,
                classes: parse_list(f[5], off, "classes")?,
                per_task_acc: parse_list(f[6], off, "per_task_acc")?,
                multi_head_acc: parse_list(f[7], off, "multi_head_acc")?,
                forgetting: parse_list(f[8], off, "forgetting")?,
                overall_acc: parse_one(f[9], off, "overall_acc")?,
                flops: crate::flops::FlopsCounters {
                    fwd: parse_one(f[10], off, "fwd_flops")?,
                    bwd: parse_one(f[11], off, "bwd_flops")?,
                    upd: parse_one(f[12], off, "upd_flops")?,
                },
                frozen_elements: parse_one(f[13], off, "frozen_elements")?,
                total_elements: parse_one(f[14], off, "total_elements")?,
            },
        });
    }
    Ok(out)
}

/// Groups parsed summary rows back into runs, preserving first-seen order
/// of (run, strategy) pairs and of seeds within a run.
pub fn group_summaries(rows: Vec<SummaryRow>) -> Vec<RunMetrics> {
    let mut runs: Vec<RunMetrics> = Vec::new();
    for row in rows {
        let ri = runs
            .iter()
            .position(|r| r.run == row.run && r.strategy == row.strategy)
            .unwrap_or_else(|| {
                runs.push(RunMetrics {
                    run: row.run.clone(),
                    strategy: row.strategy,
                    seeds: Vec::new(),
                });
                runs.len() - 1
            });
        let run = &mut runs[ri];
        let si = run
            .seeds
            .iter()
            .position(|s| s.seed == row.seed)
            .unwrap_or_else(|| {
                run.seeds.push(SeedMetrics {
                    seed: row.seed,
                    records: Vec::new(),
                    summaries: Vec::new(),
                });
                run.seeds.len() - 1
            });
        run.seeds[si].summaries.push(row.summary);
    }
    runs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flops::FlopsCounters;
    use crate::rehearsal::EpochPhase;
    use crate::trainer::Stage;

    fn record(task: usize, epoch: usize) -> EpochRecord {
        EpochRecord {
            task,
            stage: Stage::Train,
            epoch,
            phase: EpochPhase::Balanced,
            lr: 0.1 * (1.0 / 3.0),
            train_loss: 0.1 + 0.2, // deliberately not exactly 0.3
            steps: 7,
            fwd_flops: 123_456_789_012,
            bwd_flops: 246_913_578_024,
            upd_flops: 98_765,
            free_elements: 1000,
            total_elements: 1200,
            per_task_acc: vec![0.9375, 1.0 / 3.0],
            overall_acc: 0.625,
        }
    }

    fn summary(task: usize, overall: f64) -> TaskSummary {
        TaskSummary {
            task,
            classes: vec![2 * task, 2 * task + 1],
            per_task_acc: (0..=task).map(|t| 0.5 + 0.1 * t as f64).collect(),
            multi_head_acc: (0..=task).map(|t| 0.6 + 0.1 * t as f64).collect(),
            forgetting: (0..=task).map(|t| 0.01 * t as f64).collect(),
            overall_acc: overall,
            flops: FlopsCounters {
                fwd: 10,
                bwd: 20,
                upd: 5,
            },
            frozen_elements: 100 * (task + 1),
            total_elements: 1200,
        }
    }

    fn sample_run() -> RunMetrics {
        RunMetrics {
            run: "demo".into(),
            strategy: Strategy::Pst,
            seeds: vec![
                SeedMetrics {
                    seed: 1,
                    records: vec![record(0, 0), record(0, 1), record(1, 0)],
                    summaries: vec![summary(0, 0.9), summary(1, 0.7)],
                },
                SeedMetrics {
                    seed: 2,
                    records: vec![record(0, 0)],
                    summaries: vec![summary(0, 0.8), summary(1, 0.6)],
                },
            ],
        }
    }

    #[test]
    fn metrics_rows_round_trip_bit_exactly() {
        let run = sample_run();
        let text = run.metrics_csv();
        let rows = parse_metrics_csv(&text).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].run, "demo");
        assert_eq!(rows[0].seed, 1);
        assert_eq!(rows[3].seed, 2);
        assert_eq!(rows[0].record, record(0, 0));
        // Emit → parse → emit is byte-stable.
        let again = RunMetrics {
            run: run.run.clone(),
            strategy: run.strategy,
            seeds: vec![
                SeedMetrics {
                    seed: 1,
                    records: rows[..3].iter().map(|r| r.record.clone()).collect(),
                    summaries: vec![],
                },
                SeedMetrics {
                    seed: 2,
                    records: vec![rows[3].record.clone()],
                    summaries: vec![],
                },
            ],
        };
        assert_eq!(text, again.metrics_csv());
    }

    #[test]
    fn summary_rows_round_trip_bit_exactly() {
        let run = sample_run();
        let text = run.summary_csv();
        let rows = parse_summary_csv(&text).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[1].summary, summary(1, 0.7));
        let grouped = group_summaries(rows);
        assert_eq!(grouped.len(), 1);
        assert_eq!(grouped[0].seeds.len(), 2);
        assert_eq!(grouped[0].summary_csv(), text);
    }

    #[test]
    fn wrong_header_is_rejected_as_a_different_schema() {
        let run = sample_run();
        let err = parse_metrics_csv(&run.summary_csv()).unwrap_err();
        match err {
            PstError::Parse { offset, ref msg } => {
                assert_eq!(offset, 0);
                assert!(msg.contains("metrics"), "{msg}");
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn malformed_rows_report_the_byte_offset_of_the_line() {
        let run = sample_run();
        let mut text = run.metrics_csv();
        let line_start = text.rfind("1,demo,2").unwrap() as u64;
        text = text.replace("1,demo,2,pst", "1,demo,NOT_A_SEED,pst");
        let err = parse_metrics_csv(&text).unwrap_err();
        match err {
            PstError::Parse { offset, ref msg } => {
                assert_eq!(offset, line_start);
                assert!(msg.contains("seed"), "{msg}");
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn aggregate_is_the_arithmetic_mean_over_seeds() {
        let run = sample_run();
        let agg = run.aggregate().unwrap();
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].seeds, 2);
        assert!((agg[0].overall_acc - 0.85).abs() < 1e-12);
        assert!((agg[1].overall_acc - 0.65).abs() < 1e-12);
        // Task 1's forgetting vector is [0.0, 0.01]; prior tasks = [0.0].
        assert!((agg[1].mean_forgetting - 0.0).abs() < 1e-12);
        assert!((agg[0].first_task_acc - 0.5).abs() < 1e-12);
        assert!((agg[1].first_task_acc - 0.5).abs() < 1e-12);
        let text = run.aggregate_csv().unwrap();
        assert!(text.starts_with(AGGREGATE_HEADER));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn mismatched_task_counts_across_seeds_refuse_to_aggregate() {
        let mut run = sample_run();
        run.seeds[1].summaries.pop();
        assert!(run.aggregate().is_err());
    }

    #[test]
    fn empty_lists_survive_the_round_trip() {
        let mut run = sample_run();
        run.seeds.truncate(1);
        run.seeds[0].records.truncate(1);
        run.seeds[0].records[0].per_task_acc.clear();
        run.seeds[0].summaries.clear();
        let rows = parse_metrics_csv(&run.metrics_csv()).unwrap();
        assert!(rows[0].record.per_task_acc.is_empty());
    }
}
