//! Runs the (variant x order x seed) grid and writes its artefacts.
//!
//! Layout of the output directory:
//!
//! ```text
//! results.csv                 one row per (variant, order, seed, task)
//! summary.json                per-variant aggregates
//! logs/<run>.jsonl            run header, epochs, evaluations, trajectories
//! checkpoints/<run>.apdc      final state of every run
//! ```
//!
//! Runs execute on the worker pool; all files are written afterwards by the
//! calling thread in grid order, so the output is independent of scheduling.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::consolidation::ConsolidationReport;
use crate::error::{ApdError, Result};
use crate::harness::checkpoint;
use crate::harness::config::ExperimentConfig;
use crate::metrics::{self, CapacityReport, PerformanceMatrix};
use crate::parallel::{map_collect, with_thread_cap, Exec};
use crate::params::DecomposedState;
use crate::taskgen::TaskDataset;
use crate::trainer::{EpochLog, SequenceRunner, Variant};

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "APD_THREADS";

/// Reads [`THREADS_ENV`]; unset means no cap.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(ApdError::InvalidArgument(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct RunKey {
    pub variant: Variant,
    pub order_id: usize,
    pub seed: u64,
}

impl RunKey {
    pub fn stem(&self) -> String {
        format!("{}_o{}_s{}", self.variant, self.order_id, self.seed)
    }
}

/// One line of a run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Run {
        variant: String,
        order_id: usize,
        seed: u64,
        order: Vec<u32>,
    },
    Epoch(EpochLog),
    Consolidation {
        checkpoint: usize,
        report: ConsolidationReport,
    },
    Eval {
        checkpoint: usize,
        task: u32,
        accuracy: f64,
    },
    Trajectory {
        checkpoint: usize,
        task: u32,
        params: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub key: RunKey,
    pub order: Vec<usize>,
    pub state: DecomposedState,
    pub performance: PerformanceMatrix,
    pub capacity: CapacityReport,
    pub forgetting: Option<(f64, f64)>,
    pub records: Vec<LogRecord>,
}

/// Trains one run of the grid.
pub fn execute_run(
    key: RunKey,
    tasks: &[TaskDataset],
    order: &[usize],
    cfg: &ExperimentConfig,
) -> Result<RunResult> {
    let arch = cfg.architecture(tasks[0].input_dim());
    let hp = crate::trainer::HyperParams {
        seed: key.seed,
        ..cfg.hyper.clone()
    };
    let mut runner = SequenceRunner::new(tasks, order, &hp, &key.variant, &arch)?;
    let mut records = vec![LogRecord::Run {
        variant: key.variant.to_string(),
        order_id: key.order_id,
        seed: key.seed,
        order: order.iter().map(|&i| tasks[i].task_id.0).collect(),
    }];
    while let Some(step) = runner.step()? {
        records.extend(step.logs.into_iter().map(LogRecord::Epoch));
        if let Some(report) = step.consolidation {
            records.push(LogRecord::Consolidation {
                checkpoint: step.position,
                report,
            });
        }
        let entry = runner.state().history.last().expect("step records history");
        for &(task, accuracy) in &entry.accuracies {
            records.push(LogRecord::Eval {
                checkpoint: step.position,
                task: task.0,
                accuracy,
            });
        }
        records.extend(step.trajectory.into_iter().map(|p| LogRecord::Trajectory {
            checkpoint: p.checkpoint,
            task: p.task,
            params: p.params,
        }));
    }
    let state = runner.state().clone();
    let performance = PerformanceMatrix::from_history(&state.history)?;
    let base = arch.base_count(tasks[order[0]].num_classes);
    let capacity = metrics::capacity(&state, base)?;
    let forgetting = if performance.num_tasks() >= 2 {
        Some(metrics::forgetting(&performance.rows)?)
    } else {
        None
    };
    Ok(RunResult {
        key,
        order: order.to_vec(),
        state,
        performance,
        capacity,
        forgetting,
        records,
    })
}

/// Trains every run of the grid, in grid order, on the capped worker pool.
pub fn execute(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<Vec<RunResult>> {
    let mut streams = BTreeMap::new();
    for &seed in &cfg.seeds {
        streams.insert(seed, cfg.tasks(seed)?);
    }
    let t = streams.values().next().map_or(0, Vec::len);
    let orders = cfg.resolve_orders(t)?;
    let mut keys = Vec::new();
    for &variant in &cfg.variants {
        for order_id in 0..orders.len() {
            for &seed in &cfg.seeds {
                keys.push(RunKey {
                    variant,
                    order_id,
                    seed,
                });
            }
        }
    }
    let results = with_thread_cap(threads, || {
        map_collect(Exec::default_policy(), &keys, |k| {
            execute_run(*k, &streams[&k.seed], &orders[k.order_id], cfg)
        })
    });
    results.into_iter().collect()
}

/// A row of `results.csv`. Undefined statistics (one order, one task) are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: String,
    pub order_id: usize,
    pub seed: u64,
    pub task: u32,
    pub final_accuracy: f64,
    pub capacity_pct: f64,
    pub opd: Option<f64>,
    pub aopd: Option<f64>,
    pub mopd: Option<f64>,
    pub avg_forgetting: Option<f64>,
    pub worst_forgetting: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: usize,
    pub mean_final_accuracy: f64,
    pub capacity_pct: f64,
    pub tau_nonzeros: f64,
    /// Mean over seeds of the across-order statistics.
    pub aopd: Option<f64>,
    pub mopd: Option<f64>,
    pub avg_forgetting: Option<f64>,
    pub worst_forgetting: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub tasks: usize,
    pub orders: Vec<Vec<usize>>,
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantSummary>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean of the defined entries; `None` when nothing is defined.
fn mean_opt(xs: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = xs.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| mean(&v))
}

/// Per-task final accuracies of one (variant, seed) across orders:
/// `out[task][order]`, tasks in id order.
fn across_orders(rows: &[&ResultRow]) -> Vec<Vec<f64>> {
    let mut by_task: BTreeMap<u32, BTreeMap<usize, f64>> = BTreeMap::new();
    for r in rows {
        by_task.entry(r.task).or_default().insert(r.order_id, r.final_accuracy);
    }
    by_task.into_values().map(|m| m.into_values().collect()).collect()
}

/// Fills the across-order columns of `rows` in place.
pub fn fill_order_stats(rows: &mut [ResultRow]) -> Result<()> {
    let mut groups: BTreeMap<(String, u64), Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        groups.entry((r.variant.clone(), r.seed)).or_default().push(i);
    }
    for idx in groups.values() {
        let members: Vec<&ResultRow> = idx.iter().map(|&i| &rows[i]).collect();
        let orders = members.iter().map(|r| r.order_id).collect::<std::collections::BTreeSet<_>>();
        if orders.len() < 2 {
            continue;
        }
        let per_task = across_orders(&members);
        let aopd = metrics::aopd(&per_task)?;
        let mopd = metrics::mopd(&per_task)?;
        let mut per_task_opd = BTreeMap::new();
        for r in &members {
            per_task_opd.entry(r.task).or_insert(Vec::new()).push(r.final_accuracy);
        }
        let opds: BTreeMap<u32, f64> = per_task_opd
            .into_iter()
            .map(|(t, v)| metrics::opd(&v).map(|o| (t, o)))
            .collect::<Result<_>>()?;
        for &i in idx {
            rows[i].opd = Some(opds[&rows[i].task]);
            rows[i].aopd = Some(aopd);
            rows[i].mopd = Some(mopd);
        }
    }
    Ok(())
}

pub fn result_rows(results: &[RunResult]) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for r in results {
        for (task, acc) in r.performance.final_accuracies() {
            rows.push(ResultRow {
                variant: r.key.variant.to_string(),
                order_id: r.key.order_id,
                seed: r.key.seed,
                task: task.0,
                final_accuracy: acc,
                capacity_pct: r.capacity.percent,
                opd: None,
                aopd: None,
                mopd: None,
                avg_forgetting: r.forgetting.map(|f| f.0),
                worst_forgetting: r.forgetting.map(|f| f.1),
            });
        }
    }
    fill_order_stats(&mut rows)?;
    Ok(rows)
}

/// Aggregates rows per variant, in first-appearance order.
pub fn summarize_rows(rows: &[ResultRow]) -> Vec<VariantSummary> {
    let mut names: Vec<String> = Vec::new();
    for r in rows {
        if !names.contains(&r.variant) {
            names.push(r.variant.clone());
        }
    }
    names
        .into_iter()
        .map(|name| {
            let mine: Vec<&ResultRow> = rows.iter().filter(|r| r.variant == name).collect();
            let mut runs: BTreeMap<(usize, u64), Vec<&ResultRow>> = BTreeMap::new();
            for r in &mine {
                runs.entry((r.order_id, r.seed)).or_default().push(r);
            }
            let mut seeds: BTreeMap<u64, &ResultRow> = BTreeMap::new();
            for r in &mine {
                seeds.entry(r.seed).or_insert(r);
            }
            let run_first: Vec<&ResultRow> = runs.values().map(|v| v[0]).collect();
            VariantSummary {
                variant: name,
                runs: runs.len(),
                mean_final_accuracy: mean(
                    &runs
                        .values()
                        .map(|v| mean(&v.iter().map(|r| r.final_accuracy).collect::<Vec<_>>()))
                        .collect::<Vec<_>>(),
                ),
                capacity_pct: mean(&run_first.iter().map(|r| r.capacity_pct).collect::<Vec<_>>()),
                tau_nonzeros: 0.0,
                aopd: mean_opt(&seeds.values().map(|r| r.aopd).collect::<Vec<_>>()),
                mopd: mean_opt(&seeds.values().map(|r| r.mopd).collect::<Vec<_>>()),
                avg_forgetting: mean_opt(&run_first.iter().map(|r| r.avg_forgetting).collect::<Vec<_>>()),
                worst_forgetting: mean_opt(
                    &run_first.iter().map(|r| r.worst_forgetting).collect::<Vec<_>>(),
                ),
            }
        })
        .collect()
}

pub fn summarize(cfg: &ExperimentConfig, results: &[RunResult], rows: &[ResultRow]) -> Summary {
    let mut variants = summarize_rows(rows);
    for v in variants.iter_mut() {
        let nz: Vec<f64> = results
            .iter()
            .filter(|r| r.key.variant.to_string() == v.variant)
            .map(|r| r.state.tau_nonzeros() as f64)
            .collect();
        v.tau_nonzeros = mean(&nz);
    }
    let mut orders = Vec::new();
    for r in results {
        if orders.len() <= r.key.order_id {
            orders.resize(r.key.order_id + 1, Vec::new());
        }
        orders[r.key.order_id] = r.order.clone();
    }
    Summary {
        tasks: results.first().map_or(0, |r| r.order.len()),
        orders,
        seeds: cfg.seeds.clone(),
        variants,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| {
        ApdError::Io(std::io::Error::new(
            e.kind(),
            format!("cannot create {}: {e}", path.display()),
        ))
    })
}

pub fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(ApdError::from)).collect()
}

pub fn write_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                ApdError::InvalidArgument(format!("{}:{}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

/// Writes every artefact of `results` under `cfg.output_dir`.
pub fn write_outputs(cfg: &ExperimentConfig, results: &[RunResult]) -> Result<Summary> {
    let out = &cfg.output_dir;
    create_dir(&out.join("logs"))?;
    if cfg.checkpoints {
        create_dir(&out.join("checkpoints"))?;
    }
    let rows = result_rows(results)?;
    write_rows(&out.join("results.csv"), &rows)?;
    for r in results {
        write_log(&out.join("logs").join(format!("{}.jsonl", r.key.stem())), &r.records)?;
        if cfg.checkpoints {
            checkpoint::save(
                &r.state,
                &out.join("checkpoints").join(format!("{}.apdc", r.key.stem())),
            )?;
        }
    }
    let summary = summarize(cfg, results, &rows);
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    std::fs::write(out.join("summary.json"), json)?;
    Ok(summary)
}

/// Trains the grid and writes its artefacts.
pub fn run(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<Summary> {
    create_dir(&cfg.output_dir)?;
    let results = execute(cfg, threads)?;
    write_outputs(cfg, &results)
}

/// Renders the per-variant aggregates of an output directory's `results.csv`.
pub fn metrics_report(dir: &Path) -> Result<String> {
    let rows = read_rows(&dir.join("results.csv"))?;
    if rows.is_empty() {
        return Err(ApdError::Empty("results.csv"));
    }
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    let mut s = format!(
        "{:<28} {:>5} {:>9} {:>9} {:>8} {:>8} {:>8} {:>8}\n",
        "variant", "runs", "accuracy", "capacity", "aopd", "mopd", "avg_fgt", "max_fgt"
    );
    for v in summarize_rows(&rows) {
        s.push_str(&format!(
            "{:<28} {:>5} {:>9.4} {:>8.1}% {:>8} {:>8} {:>8} {:>8}\n",
            v.variant,
            v.runs,
            v.mean_final_accuracy,
            v.capacity_pct,
            fmt(v.aopd),
            fmt(v.mopd),
            fmt(v.avg_forgetting),
            fmt(v.worst_forgetting)
        ));
    }
    Ok(s)
}

/// Trajectory of one task in one log, ordered by checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskTrajectory {
    pub log: PathBuf,
    pub task: u32,
    pub checkpoints: Vec<usize>,
    pub params: Vec<Vec<f64>>,
}

/// Extracts `task`'s trajectory, defaulting to the first task of the run.
pub fn trajectory_from_log(path: &Path, task: Option<u32>) -> Result<TaskTrajectory> {
    let records = read_log(path)?;
    let first = records.iter().find_map(|r| match r {
        LogRecord::Run { order, .. } => order.first().copied(),
        _ => None,
    });
    let task = task
        .or(first)
        .ok_or_else(|| ApdError::InvalidArgument(format!("{}: no run header", path.display())))?;
    let mut checkpoints = Vec::new();
    let mut params = Vec::new();
    for r in records {
        if let LogRecord::Trajectory {
            checkpoint,
            task: t,
            params: p,
        } = r
        {
            if t == task {
                checkpoints.push(checkpoint);
                params.push(p);
            }
        }
    }
    if params.is_empty() {
        return Err(ApdError::InvalidArgument(format!(
            "{}: no trajectory for task {task}",
            path.display()
        )));
    }
    Ok(TaskTrajectory {
        log: path.to_path_buf(),
        task,
        checkpoints,
        params,
    })
}

/// Projects several trajectories onto one shared 2-D PCA basis.
pub fn joint_pca(trajectories: &[TaskTrajectory]) -> Result<Vec<Vec<[f64; 2]>>> {
    let all: Vec<Vec<f64>> = trajectories.iter().flat_map(|t| t.params.iter().cloned()).collect();
    let pca = metrics::pca2d(&all)?;
    let mut out = Vec::with_capacity(trajectories.len());
    let mut k = 0;
    for t in trajectories {
        out.push(pca.points[k..k + t.params.len()].to_vec());
        k += t.params.len();
    }
    Ok(out)
}

/// Writes `log,task,checkpoint,pc1,pc2` rows for the joint projection of the
/// given logs and returns each trajectory's 2-D path length.
pub fn export_pca(logs: &[PathBuf], task: Option<u32>, out: &Path) -> Result<Vec<f64>> {
    let trajectories = logs
        .iter()
        .map(|p| trajectory_from_log(p, task))
        .collect::<Result<Vec<_>>>()?;
    let points = joint_pca(&trajectories)?;
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["log", "task", "checkpoint", "pc1", "pc2"])?;
    for (t, pts) in trajectories.iter().zip(&points) {
        let name = t.log.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        for (c, p) in t.checkpoints.iter().zip(pts) {
            w.write_record([
                name.clone(),
                t.task.to_string(),
                c.to_string(),
                p[0].to_string(),
                p[1].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(points.iter().map(|p| metrics::path_length(p)).collect())
}
