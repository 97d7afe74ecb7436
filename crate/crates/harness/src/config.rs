//! Flat `key = value` experiment files with command-line overrides.
//!
//! Lines are `key = value`; blank lines and `#` comments are skipped. The
//! same key table backs both the file and `--set key=value` / named flags,
//! so a flag is just a later assignment to the same key.

use std::path::{Path, PathBuf};

use trl_core::metalearn::{MetaConfig, OptimizerKind};
use trl_core::tasks::{TaskFamily, TaskGenerator, DEFAULT_NOISE_SD};

use crate::error::{HarnessError, Result};

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "dataset",
    "shots",
    "query",
    "noise_sd",
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
    "runs",
    "seed",
    "epochs",
    "batches_per_epoch",
    "pool_size",
    "eval_tasks",
    "validation_tasks",
    "optimizer",
    "momentum",
    "weight_decay",
    "layer_sizes",
    "relation_grad_to_extractor",
    "freeze_inner_lr",
    "reset_heads",
    "eval_head",
    "metadata_strategy",
    "metadata_samples",
    "snapshot_every",
    "checked",
    "record_timing",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub dataset: TaskFamily,
    /// Support points per task.
    pub shots: usize,
    /// Query points per task.
    pub query: usize,
    pub noise_sd: f64,
    pub runs: usize,
    /// Size of the fixed training task pool.
    pub pool_size: usize,
    /// Held-out tasks scored after training.
    pub eval_tasks: usize,
    /// Held-out tasks scored after every epoch (0 disables).
    pub validation_tasks: usize,
    pub meta: MetaConfig,
    pub out: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            dataset: TaskFamily::Sinusoid,
            shots: 10,
            query: 10,
            noise_sd: DEFAULT_NOISE_SD,
            runs: 5,
            pool_size: 480,
            eval_tasks: 100,
            validation_tasks: 0,
            meta: MetaConfig::default(),
            out: PathBuf::from("out"),
        }
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got {v:?}")),
    }
}

fn parse<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.trim().parse::<T>().map_err(|e| format!("{e} ({v:?})"))
}

fn optimizer_name(kind: &OptimizerKind) -> &'static str {
    match kind {
        OptimizerKind::Sgd { .. } => "sgd",
        OptimizerKind::Adam { .. } => "adam",
    }
}

fn momentum_and_decay(kind: &OptimizerKind) -> (f64, f64) {
    match *kind {
        OptimizerKind::Sgd {
            momentum,
            weight_decay,
        } => (momentum, weight_decay),
        OptimizerKind::Adam {
            beta1, weight_decay, ..
        } => (beta1, weight_decay),
    }
}

fn build_optimizer(name: &str, momentum: f64, weight_decay: f64) -> std::result::Result<OptimizerKind, String> {
    match name {
        "sgd" => Ok(OptimizerKind::Sgd {
            momentum,
            weight_decay,
        }),
        // momentum doubles as Adam's first-moment decay
        "adam" => Ok(OptimizerKind::Adam {
            beta1: momentum,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }),
        other => Err(format!("unknown optimizer {other:?}")),
    }
}

impl ExperimentSpec {
    /// Assigns one key. Errors carry a message for that key only.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let m = &mut self.meta;
        match key {
            "dataset" => self.dataset = parse(v)?,
            "shots" => self.shots = parse(v)?,
            "query" => self.query = parse(v)?,
            "noise_sd" => self.noise_sd = parse(v)?,
            "method" => m.method = parse(v)?,
            "trlearner" => m.trlearner = parse_bool(v)?,
            "matrix_mode" => m.matrix_mode = parse(v)?,
            "lambda" => m.lambda = parse(v)?,
            "alpha" => m.alpha = parse(v)?,
            "beta" => m.beta = parse(v)?,
            "heads" => m.similarity_heads = parse(v)?,
            "batch_tasks" => m.n_tasks = parse(v)?,
            "inner_steps" => m.inner_steps = parse(v)?,
            "first_order" => m.second_order = !parse_bool(v)?,
            "runs" => self.runs = parse(v)?,
            "seed" => m.seed = parse(v)?,
            "epochs" => m.epochs = parse(v)?,
            "batches_per_epoch" => m.batches_per_epoch = parse(v)?,
            "pool_size" => self.pool_size = parse(v)?,
            "eval_tasks" => self.eval_tasks = parse(v)?,
            "validation_tasks" => self.validation_tasks = parse(v)?,
            "optimizer" => {
                let (mo, wd) = momentum_and_decay(&m.optimizer);
                m.optimizer = build_optimizer(v, mo, wd)?;
            }
            "momentum" => {
                let (_, wd) = momentum_and_decay(&m.optimizer);
                m.optimizer = build_optimizer(optimizer_name(&m.optimizer), parse(v)?, wd)?;
            }
            "weight_decay" => {
                let (mo, _) = momentum_and_decay(&m.optimizer);
                m.optimizer = build_optimizer(optimizer_name(&m.optimizer), mo, parse(v)?)?;
            }
            "layer_sizes" => {
                m.layer_sizes = v
                    .split(',')
                    .map(parse::<usize>)
                    .collect::<std::result::Result<_, _>>()?
            }
            "relation_grad_to_extractor" => m.relation_grad_to_extractor = parse_bool(v)?,
            "freeze_inner_lr" => m.freeze_inner_lr = parse_bool(v)?,
            "reset_heads" => m.reset_heads = parse_bool(v)?,
            "eval_head" => m.eval_head = parse(v)?,
            "metadata_strategy" => m.metadata_strategy = parse(v)?,
            "metadata_samples" => {
                m.metadata_samples = if v == "all" { None } else { Some(parse(v)?) }
            }
            "snapshot_every" => m.snapshot_every = parse(v)?,
            "checked" => m.checked = parse_bool(v)?,
            "record_timing" => m.record_timing = parse_bool(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Current value of every key, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.meta;
        let (momentum, weight_decay) = momentum_and_decay(&m.optimizer);
        KEYS.iter()
            .map(|&k| {
                let v = match k {
                    "dataset" => self.dataset.to_string(),
                    "shots" => self.shots.to_string(),
                    "query" => self.query.to_string(),
                    "noise_sd" => self.noise_sd.to_string(),
                    "method" => m.method.to_string(),
                    "trlearner" => m.trlearner.to_string(),
                    "matrix_mode" => m.matrix_mode.to_string(),
                    "lambda" => m.lambda.to_string(),
                    "alpha" => m.alpha.to_string(),
                    "beta" => m.beta.to_string(),
                    "heads" => m.similarity_heads.to_string(),
                    "batch_tasks" => m.n_tasks.to_string(),
                    "inner_steps" => m.inner_steps.to_string(),
                    "first_order" => (!m.second_order).to_string(),
                    "runs" => self.runs.to_string(),
                    "seed" => m.seed.to_string(),
                    "epochs" => m.epochs.to_string(),
                    "batches_per_epoch" => m.batches_per_epoch.to_string(),
                    "pool_size" => self.pool_size.to_string(),
                    "eval_tasks" => self.eval_tasks.to_string(),
                    "validation_tasks" => self.validation_tasks.to_string(),
                    "optimizer" => optimizer_name(&m.optimizer).to_string(),
                    "momentum" => momentum.to_string(),
                    "weight_decay" => weight_decay.to_string(),
                    "layer_sizes" => m
                        .layer_sizes
                        .iter()
                        .map(|s| s.to_string())
                        .collect::<Vec<_>>()
                        .join(","),
                    "relation_grad_to_extractor" => m.relation_grad_to_extractor.to_string(),
                    "freeze_inner_lr" => m.freeze_inner_lr.to_string(),
                    "reset_heads" => m.reset_heads.to_string(),
                    "eval_head" => m.eval_head.to_string(),
                    "metadata_strategy" => m.metadata_strategy.to_string(),
                    "metadata_samples" => m
                        .metadata_samples
                        .map_or_else(|| "all".to_string(), |s| s.to_string()),
                    "snapshot_every" => m.snapshot_every.to_string(),
                    "checked" => m.checked.to_string(),
                    "record_timing" => m.record_timing.to_string(),
                    _ => unreachable!("key table and echo out of sync: {k}"),
                };
                (k, v)
            })
            .collect()
    }

    /// The effective configuration as a loadable file.
    pub fn echo(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn problems(&self) -> Vec<(String, String)> {
        let mut bad: Vec<(String, String)> = self
            .meta
            .problems()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        if self.runs == 0 {
            bad.push(("runs".into(), "must be >= 1".into()));
        }
        if self.shots == 0 {
            bad.push(("shots".into(), "must be >= 1".into()));
        }
        if self.query == 0 {
            bad.push(("query".into(), "must be >= 1".into()));
        }
        if self.eval_tasks == 0 {
            bad.push(("eval_tasks".into(), "must be >= 1".into()));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            bad.push(("noise_sd".into(), format!("must be >= 0, got {}", self.noise_sd)));
        }
        if self.pool_size < self.meta.n_tasks {
            bad.push((
                "pool_size".into(),
                format!("{} is smaller than batch_tasks {}", self.pool_size, self.meta.n_tasks),
            ));
        }
        if self.meta.layer_sizes.first().is_some_and(|&w| w != 1) {
            bad.push(("layer_sizes".into(), "input width must be 1".into()));
        }
        if let Some(m) = self.meta.metadata_samples {
            if m > self.shots {
                bad.push((
                    "metadata_samples".into(),
                    format!("{m} exceeds shots {}", self.shots),
                ));
            }
        }
        bad
    }

    pub fn generator(&self) -> TaskGenerator {
        TaskGenerator {
            family: self.dataset,
            n_support: self.shots,
            n_query: self.query,
            noise_sd: self.noise_sd,
        }
    }

    /// Short row label, e.g. `sinusoid 10-shot maml+trlearner`.
    pub fn label(&self) -> String {
        let tr = if self.meta.trlearner { "+trlearner" } else { "" };
        format!("{} {}-shot {}{tr}", self.dataset, self.shots, self.meta.method)
    }
}

/// Splits a config file into `(line, key, value)` triples.
pub fn parse_kv(text: &str) -> std::result::Result<Vec<(usize, String, String)>, Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut bad = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => {
                out.push((n + 1, k.trim().to_string(), v.trim().to_string()))
            }
            _ => bad.push((format!("line {}", n + 1), format!("expected key = value, got {raw:?}"))),
        }
    }
    if bad.is_empty() {
        Ok(out)
    } else {
        Err(bad)
    }
}

/// Defaults, then `file` (if any), then `overrides` in order.
///
/// Every unknown key, repeated file key or invalid value is collected into
/// one [`HarnessError::Config`].
pub fn parse_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::default();
    let mut bad: Vec<(String, String)> = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::ConfigFile {
            path: path.to_path_buf(),
            source,
        })?;
        match parse_kv(&text) {
            Ok(entries) => {
                let mut seen: Vec<&str> = Vec::new();
                for (line, k, v) in &entries {
                    if seen.contains(&k.as_str()) {
                        bad.push((k.clone(), format!("given twice (line {line})")));
                        continue;
                    }
                    seen.push(k);
                    if let Err(e) = spec.set(k, v) {
                        bad.push((k.clone(), format!("{e} (line {line})")));
                    }
                }
            }
            Err(mut lines) => bad.append(&mut lines),
        }
    }
    for (k, v) in overrides {
        if let Err(e) = spec.set(k, v) {
            bad.push((k.clone(), e));
        }
    }
    bad.extend(spec.problems());
    if bad.is_empty() {
        Ok(spec)
    } else {
        Err(HarnessError::Config(bad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    fn kv(k: &str, v: &str) -> (String, String) {
        (k.to_string(), v.to_string())
    }

    #[test]
    fn empty_file_gives_defaults() {
        let f = file("");
        let spec = parse_config(Some(f.path()), &[]).unwrap();
        assert_eq!(spec.meta.lambda, 0.6);
        assert_eq!(spec.meta.beta, 0.1);
        assert_eq!(spec.runs, 5);
        assert_eq!(
            spec.meta.optimizer,
            OptimizerKind::Sgd {
                momentum: 0.8,
                weight_decay: 0.7e-5
            }
        );
        assert_eq!(spec.meta.batches_per_epoch, 100);
    }

    #[test]
    fn flags_override_file() {
        let f = file("lambda = 0.6\nruns = 3 # three\n");
        let spec = parse_config(Some(f.path()), &[kv("lambda", "0.0")]).unwrap();
        assert_eq!(spec.meta.lambda, 0.0);
        assert_eq!(spec.runs, 3);
    }

    #[test]
    fn negative_shots_rejected() {
        let err = parse_config(None, &[kv("shots", "-1")]).unwrap_err();
        assert_eq!(err.offending_keys(), vec!["shots"]);
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn every_offending_key_is_listed() {
        let f = file("colour = red\nalpha = fast\nalpha = 0.1\n");
        let err = parse_config(Some(f.path()), &[kv("runs", "x")]).unwrap_err();
        assert_eq!(err.offending_keys(), vec!["colour", "alpha", "alpha", "runs"]);
    }

    #[test]
    fn range_problems_are_keyed() {
        let err = parse_config(None, &[kv("runs", "0"), kv("batch_tasks", "1")]).unwrap_err();
        let keys = err.offending_keys();
        assert!(keys.contains(&"runs"));
        assert!(keys.contains(&"batch_tasks"));
    }

    #[test]
    fn malformed_line_is_reported() {
        let f = file("just words\n");
        let err = parse_config(Some(f.path()), &[]).unwrap_err();
        assert_eq!(err.offending_keys(), vec!["line 1"]);
    }

    #[test]
    fn echo_reloads_to_the_same_spec() {
        let overrides = [
            kv("dataset", "harmonic"),
            kv("method", "anil"),
            kv("optimizer", "adam"),
            kv("momentum", "0.9"),
            kv("metadata_samples", "4"),
            kv("first_order", "yes"),
            kv("layer_sizes", "1,8,8"),
            kv("eval_head", "mean"),
        ];
        let spec = parse_config(None, &overrides).unwrap();
        let f = file(&spec.echo());
        assert_eq!(parse_config(Some(f.path()), &[]).unwrap(), spec);
    }

    #[test]
    fn every_key_is_settable() {
        let spec = ExperimentSpec::default();
        for (k, v) in spec.entries() {
            let mut copy = spec.clone();
            copy.set(k, &v).unwrap_or_else(|e| panic!("{k}: {e}"));
            assert_eq!(copy, spec, "{k}");
        }
    }
}
