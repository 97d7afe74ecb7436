use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::relation::RelationMatrix;
use crate::tasks::{TaskBatch, TaskInstance, TaskSource};

use super::eval::evaluate;
use super::outer::MetaLearner;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    /// `train`, `validation` or `matrix`.
    pub split: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_task_losses: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    /// Raw relation matrix of the epoch's last meta-batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<RelationMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_seconds: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn matrix_snapshots(&self) -> impl Iterator<Item = (usize, &RelationMatrix)> {
        self.records
            .iter()
            .filter_map(|r| r.matrix.as_ref().map(|m| (r.epoch, m)))
    }
}

/// Runs `epochs × batches_per_epoch` meta-batches from `source`.
///
/// Each batch: draw tasks, extract meta-data, reset heads (if configured),
/// adapt every task, build the relation matrix, take an outer step. After
/// each epoch the mean training query loss, the validation MSE (when
/// `validation` is non-empty) and, at the snapshot interval, the relation
/// matrix are logged.
pub fn train(
    learner: &mut MetaLearner,
    source: &dyn TaskSource,
    validation: &[TaskInstance],
) -> Result<TrainingLog> {
    let cfg = learner.config.clone();
    let started = Instant::now();
    let timing = |_: ()| cfg.record_timing.then(|| started.elapsed().as_secs_f64());
    let mut log = TrainingLog::default();
    for epoch in 0..cfg.epochs {
        let mut slot_sums = vec![0.0; cfg.n_tasks];
        let mut last_matrix = None;
        for b in 0..cfg.batches_per_epoch {
            let index = (epoch * cfg.batches_per_epoch + b) as u64;
            let (tasks, batch_seed) = source.batch(index, cfg.n_tasks)?;
            let batch = TaskBatch::with_metadata(
                tasks,
                &cfg.metadata_strategy,
                cfg.metadata_samples,
                batch_seed,
            )?;
            if cfg.reset_heads {
                learner.model.reset_heads();
            }
            let metrics = learner.outer_step(&batch)?;
            for (s, l) in slot_sums.iter_mut().zip(&metrics.query_losses) {
                *s += l;
            }
            last_matrix = metrics.matrix;
        }
        let per_task: Vec<f64> = slot_sums
            .iter()
            .map(|s| s / cfg.batches_per_epoch.max(1) as f64)
            .collect();
        let mse = per_task.iter().sum::<f64>() / per_task.len().max(1) as f64;
        log.records.push(LogRecord {
            epoch,
            split: "train".into(),
            per_task_losses: per_task,
            mse: Some(mse),
            matrix: None,
            wall_seconds: timing(()),
        });
        if !validation.is_empty() {
            let v = evaluate(&learner.model, validation, &cfg)?;
            log.records.push(LogRecord {
                epoch,
                split: "validation".into(),
                per_task_losses: v.values,
                mse: Some(v.mean),
                matrix: None,
                wall_seconds: timing(()),
            });
        }
        if cfg.snapshot_every > 0 && epoch % cfg.snapshot_every == 0 {
            if let Some(m) = last_matrix {
                log.records.push(LogRecord {
                    epoch,
                    split: "matrix".into(),
                    per_task_losses: Vec::new(),
                    mse: None,
                    matrix: Some(m),
                    wall_seconds: timing(()),
                });
            }
        }
    }
    Ok(log)
}
