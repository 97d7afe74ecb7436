use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use trl_core::metalearn::{evaluate, mean_ci95, train, LogRecord, MatrixMode, MetaLearner, TrainingLog};
use trl_core::relation::{export_normalized, SimilarityLayer};
use trl_core::seed;
use trl_core::tasks::{held_out_tasks, TaskPool};

use crate::config::ExperimentSpec;
use crate::error::{HarnessError, Result};
use crate::svg;

/// One seeded train + evaluate cycle.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub run: usize,
    pub seed: u64,
    /// Mean query MSE over the held-out tasks.
    pub mse: f64,
    pub seconds: Option<f64>,
    pub log: TrainingLog,
    pub similarity: SimilarityLayer,
}

/// Aggregate of the successful runs of one spec.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub spec: ExperimentSpec,
    pub mse_mean: f64,
    /// Half-width of the normal-approximation 95% interval; `None` for a
    /// single run.
    pub ci95: Option<f64>,
    pub per_run: Vec<f64>,
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    /// `None` when every run failed.
    pub row: Option<ResultRow>,
    pub runs: Vec<RunOutcome>,
    pub failures: Vec<(usize, String)>,
}

impl Benchmark {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Spec columns of `results.csv`, before `mse_mean, ci95, seconds`.
pub const SPEC_COLUMNS: &[&str] = &[
    "dataset",
    "shots",
    "method",
    "trlearner",
    "matrix_mode",
    "lambda",
    "alpha",
    "beta",
    "heads",
    "batch_tasks",
    "inner_steps",
    "first_order",
    "epochs",
    "batches_per_epoch",
    "runs",
    "seed",
];

fn spec_fields(spec: &ExperimentSpec) -> Vec<String> {
    let entries = spec.entries();
    SPEC_COLUMNS
        .iter()
        .map(|c| {
            entries
                .iter()
                .find(|(k, _)| k == c)
                .map(|(_, v)| v.clone())
                .expect("spec column is a config key")
        })
        .collect()
}

pub fn results_header() -> Vec<&'static str> {
    let mut h = SPEC_COLUMNS.to_vec();
    h.extend(["mse_mean", "ci95", "seconds"]);
    h
}

impl ResultRow {
    pub fn record(&self) -> Vec<String> {
        let mut r = spec_fields(&self.spec);
        r.push(self.mse_mean.to_string());
        r.push(self.ci95.map_or_else(|| "n/a".into(), |c| c.to_string()));
        r.push(self.seconds.map_or_else(|| "n/a".into(), |s| format!("{s:.3}")));
        r
    }

    /// `label | MSE mean ± ci (runs)`.
    pub fn summary(&self) -> String {
        let ci = self.ci95.map_or_else(|| "n/a".into(), |c| format!("{c:.3}"));
        format!(
            "{} | MSE {:.3} ± {ci} ({} runs)",
            self.spec.label(),
            self.mse_mean,
            self.per_run.len()
        )
    }
}

/// Trains and evaluates run `run` of `spec` with seed `spec.seed + run`.
///
/// Task pools and held-out sets depend only on the seed and the task
/// settings, so specs that differ in learner settings see the same tasks.
pub fn run_once(spec: &ExperimentSpec, run: usize) -> Result<RunOutcome> {
    let started = Instant::now();
    let run_seed = spec.meta.seed.wrapping_add(run as u64);
    let mut config = spec.meta.clone();
    config.seed = run_seed;
    let gen = spec.generator();
    let pool = TaskPool::generate(&gen, spec.pool_size, run_seed)?;
    let validation = held_out_tasks(&gen, spec.validation_tasks, run_seed, seed::stream::VALIDATION)?;
    let held_out = held_out_tasks(&gen, spec.eval_tasks, run_seed, seed::stream::EVALUATION)?;
    let mut learner = MetaLearner::new(config.clone())?;
    let log = train(&mut learner, &pool, &validation)?;
    let mse = evaluate(&learner.model, &held_out, &config)?.mean;
    log::info!("{} run {run} (seed {run_seed}): mse {mse:.4}", spec.label());
    Ok(RunOutcome {
        run,
        seed: run_seed,
        mse,
        seconds: config.record_timing.then(|| started.elapsed().as_secs_f64()),
        log,
        similarity: learner.similarity,
    })
}

/// Runs every seed of `spec` in parallel; results are ordered by run index.
pub fn run_benchmark(spec: &ExperimentSpec) -> Result<Benchmark> {
    let problems = spec.problems();
    if !problems.is_empty() {
        return Err(HarnessError::Config(problems));
    }
    let results: Vec<Result<RunOutcome>> = (0..spec.runs)
        .into_par_iter()
        .map(|r| run_once(spec, r))
        .collect();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(o) => runs.push(o),
            Err(e) => {
                log::error!("{} run {r} failed: {e}", spec.label());
                failures.push((r, e.to_string()));
            }
        }
    }
    let row = if runs.is_empty() {
        None
    } else {
        let per_run: Vec<f64> = runs.iter().map(|o| o.mse).collect();
        let summary = mean_ci95(&per_run)?;
        let seconds = spec
            .meta
            .record_timing
            .then(|| runs.iter().filter_map(|o| o.seconds).sum());
        Some(ResultRow {
            spec: spec.clone(),
            mse_mean: summary.mean,
            ci95: summary.ci95,
            per_run,
            seconds,
        })
    };
    Ok(Benchmark {
        row,
        runs,
        failures,
    })
}

fn write_rows(path: &Path, rows: &[&ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(results_header())?;
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct RunLogLine {
    run: usize,
    #[serde(flatten)]
    record: LogRecord,
}

/// Training logs of every run, one JSON object per line tagged with `run`.
pub fn write_logs(path: &Path, runs: &[RunOutcome]) -> Result<()> {
    let mut text = String::new();
    for o in runs {
        for record in &o.log.records {
            text.push_str(&serde_json::to_string(&RunLogLine {
                run: o.run,
                record: record.clone(),
            })?);
            text.push('\n');
        }
    }
    fs::write(path, text)?;
    Ok(())
}

/// The log of `run` from a file written by [`write_logs`].
pub fn read_log(path: &Path, run: usize) -> Result<TrainingLog> {
    let text = fs::read_to_string(path)?;
    let mut log = TrainingLog::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let parsed: RunLogLine = serde_json::from_str(line)?;
        if parsed.run == run {
            log.records.push(parsed.record);
        }
    }
    Ok(log)
}

/// Writes `results.csv`, `runs.csv`, `log.jsonl`, `summary.txt`,
/// `config.txt` and the heatmaps of run 0 into `spec.out`.
///
/// Returns [`HarnessError::Run`] after writing if any run failed.
pub fn write_benchmark(spec: &ExperimentSpec, bench: &Benchmark) -> Result<()> {
    let dir = &spec.out;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), spec.echo())?;

    let mut w = csv::Writer::from_path(dir.join("runs.csv"))?;
    w.write_record(["run", "seed", "mse", "status"])?;
    for o in &bench.runs {
        w.write_record([o.run.to_string(), o.seed.to_string(), o.mse.to_string(), "ok".into()])?;
    }
    for (r, msg) in &bench.failures {
        let seed = spec.meta.seed.wrapping_add(*r as u64);
        w.write_record([r.to_string(), seed.to_string(), "n/a".into(), format!("failed: {msg}")])?;
    }
    w.flush()?;

    if let Some(row) = &bench.row {
        write_rows(&dir.join("results.csv"), &[row])?;
        let mut summary = row.summary();
        if !bench.is_complete() {
            summary.push_str(&format!(" PARTIAL: {} runs failed", bench.failures.len()));
        }
        fs::write(dir.join("summary.txt"), summary + "\n")?;
    }
    write_logs(&dir.join("log.jsonl"), &bench.runs)?;
    if let Some(first) = bench.runs.first() {
        export_heatmaps(&first.log, dir)?;
    }

    if bench.is_complete() {
        Ok(())
    } else {
        Err(HarnessError::Run {
            failed: bench.failures.len(),
            total: spec.runs,
            detail: bench
                .failures
                .iter()
                .map(|(r, m)| format!("run {r}: {m}"))
                .collect::<Vec<_>>()
                .join("; "),
        })
    }
}

/// [`run_benchmark`] then [`write_benchmark`].
pub fn bench(spec: &ExperimentSpec) -> Result<Benchmark> {
    let b = run_benchmark(spec)?;
    write_benchmark(spec, &b)?;
    Ok(b)
}

/// The default sweep grid.
pub const LAMBDA_GRID: [f64; 6] = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8];

/// One benchmark per `λ` in `values` (consistency term forced on), each in
/// `out/lambda_<λ>`, plus `sweep.csv` and `sweep.svg` in `out`.
pub fn sweep_lambda(spec: &ExperimentSpec, values: &[f64]) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::with_capacity(values.len());
    for &lambda in values {
        let mut s = spec.clone();
        s.meta.lambda = lambda;
        s.meta.trlearner = true;
        s.out = spec.out.join(format!("lambda_{lambda}"));
        let b = bench(&s)?;
        rows.push(b.row.expect("complete benchmark has a row"));
    }
    fs::create_dir_all(&spec.out)?;
    write_rows(&spec.out.join("sweep.csv"), &rows.iter().collect::<Vec<_>>())?;
    let points: Vec<(f64, f64, Option<f64>)> = rows
        .iter()
        .map(|r| (r.spec.meta.lambda, r.mse_mean, r.ci95))
        .collect();
    let title = format!("{} query MSE vs lambda", spec.label());
    fs::write(spec.out.join("sweep.svg"), svg::line_plot(&title, "lambda", "MSE", &points))?;
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct Ablation {
    pub learned: Benchmark,
    pub fixed: Benchmark,
}

/// Learned vs fixed relation matrix on the same seeds, in `out/learned`
/// and `out/fixed`, plus `ablation.csv` (one row per mode) and
/// `ablation_runs.csv` (paired per-seed MSEs).
pub fn ablate_matrix(spec: &ExperimentSpec) -> Result<Ablation> {
    let mode_spec = |mode: MatrixMode| {
        let mut s = spec.clone();
        s.meta.trlearner = true;
        s.meta.matrix_mode = mode;
        s.out = spec.out.join(mode.to_string());
        s
    };
    let learned = bench(&mode_spec(MatrixMode::Learned))?;
    let fixed = bench(&mode_spec(MatrixMode::Fixed))?;

    let rows: Vec<&ResultRow> = [&learned, &fixed].iter().filter_map(|b| b.row.as_ref()).collect();
    write_rows(&spec.out.join("ablation.csv"), &rows)?;
    let mut w = csv::Writer::from_path(spec.out.join("ablation_runs.csv"))?;
    w.write_record(["run", "seed", "learned_mse", "fixed_mse"])?;
    for (a, b) in learned.runs.iter().zip(&fixed.runs) {
        debug_assert_eq!(a.seed, b.seed);
        w.write_record([a.run.to_string(), a.seed.to_string(), a.mse.to_string(), b.mse.to_string()])?;
    }
    w.flush()?;
    Ok(Ablation { learned, fixed })
}

/// Row-normalized matrix snapshots of `log` as `matrix_epochNNN.csv` and
/// `.svg` in `dir`. Logs without snapshots produce nothing.
pub fn export_heatmaps(log: &TrainingLog, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (epoch, matrix) in log.matrix_snapshots() {
        let normalized = export_normalized(matrix);
        let stem = format!("matrix_epoch{epoch:03}");
        let csv_path = dir.join(format!("{stem}.csv"));
        let mut w = csv::Writer::from_path(&csv_path)?;
        for row in &normalized {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        let svg_path = dir.join(format!("{stem}.svg"));
        fs::write(&svg_path, svg::heatmap(&format!("task relations, epoch {epoch}"), &normalized))?;
        written.push(csv_path);
        written.push(svg_path);
    }
    if written.is_empty() {
        log::warn!("training log has no relation matrix snapshots; no heatmaps written");
    }
    Ok(written)
}

/// Reads a heatmap CSV back into rows.
pub fn read_matrix_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| HarnessError::Parse {
                        path: path.to_path_buf(),
                        detail: format!("{v:?}: {e}"),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}
