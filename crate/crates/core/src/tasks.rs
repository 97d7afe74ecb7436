//! Synthetic few-shot regression tasks and meta-data extraction.
//!
//! Two families are provided:
//!
//! * sinusoid: `y = A sin(w x) + b`, `A ~ U[0.1, 5]`, `w ~ U[0.5, 2]`,
//!   `b ~ U[0, 2π]`;
//! * harmonic: `y = a1 sin(ω x + b1) + a2 sin(2ω x + b2)`, `ω ~ U(5, 7)`,
//!   `b1, b2 ~ U(0, 2π)`, `a1, a2 ~ N(0, 1)`.
//!
//! Inputs are drawn from `U[-5, 5]` and every observed `y` (support and
//! query) carries independent Gaussian noise.

use std::collections::HashSet;
use std::f64::consts::TAU;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::seed;

pub const X_RANGE: (f64, f64) = (-5.0, 5.0);
pub const DEFAULT_NOISE_SD: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskFamily {
    Sinusoid,
    Harmonic,
}

impl std::str::FromStr for TaskFamily {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinusoid" => Ok(Self::Sinusoid),
            "harmonic" => Ok(Self::Harmonic),
            other => Err(invalid(format!("unknown dataset {other:?}"))),
        }
    }
}

impl std::fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sinusoid => "sinusoid",
            Self::Harmonic => "harmonic",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum TaskParams {
    Sinusoid {
        amplitude: f64,
        frequency: f64,
        offset: f64,
    },
    Harmonic {
        a1: f64,
        a2: f64,
        omega: f64,
        b1: f64,
        b2: f64,
    },
}

impl TaskParams {
    /// Noise-free target at `x`.
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Self::Sinusoid {
                amplitude,
                frequency,
                offset,
            } => amplitude * (frequency * x).sin() + offset,
            Self::Harmonic {
                a1,
                a2,
                omega,
                b1,
                b2,
            } => a1 * (omega * x + b1).sin() + a2 * (2.0 * omega * x + b2).sin(),
        }
    }

    pub fn family(&self) -> TaskFamily {
        match self {
            Self::Sinusoid { .. } => TaskFamily::Sinusoid,
            Self::Harmonic { .. } => TaskFamily::Harmonic,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub params: TaskParams,
    pub support: Vec<Point>,
    pub query: Vec<Point>,
    pub noise_sd: f64,
}

impl TaskInstance {
    pub fn family(&self) -> TaskFamily {
        self.params.family()
    }
}

pub fn gen_sinusoid(
    seed: u64,
    n_support: usize,
    n_query: usize,
    noise_sd: f64,
) -> Result<TaskInstance> {
    generate(TaskFamily::Sinusoid, seed, n_support, n_query, noise_sd)
}

pub fn gen_harmonic(
    seed: u64,
    n_support: usize,
    n_query: usize,
    noise_sd: f64,
) -> Result<TaskInstance> {
    generate(TaskFamily::Harmonic, seed, n_support, n_query, noise_sd)
}

/// Draws from the open interval `(lo, hi)`.
fn open_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    loop {
        let v = rng.gen_range(lo..hi);
        if v > lo {
            return v;
        }
    }
}

pub fn generate(
    family: TaskFamily,
    seed: u64,
    n_support: usize,
    n_query: usize,
    noise_sd: f64,
) -> Result<TaskInstance> {
    if n_support == 0 || n_query == 0 {
        return Err(invalid("support and query sizes must be at least 1"));
    }
    if !(noise_sd >= 0.0) || !noise_sd.is_finite() {
        return Err(invalid(format!("noise_sd must be >= 0, got {noise_sd}")));
    }
    let mut rng = seed::rng(seed);
    let params = match family {
        TaskFamily::Sinusoid => TaskParams::Sinusoid {
            amplitude: rng.gen_range(0.1..=5.0),
            frequency: rng.gen_range(0.5..=2.0),
            offset: rng.gen_range(0.0..=TAU),
        },
        TaskFamily::Harmonic => {
            let omega = open_uniform(&mut rng, 5.0, 7.0);
            let b1 = open_uniform(&mut rng, 0.0, TAU);
            let b2 = open_uniform(&mut rng, 0.0, TAU);
            let a1: f64 = StandardNormal.sample(&mut rng);
            let a2: f64 = StandardNormal.sample(&mut rng);
            TaskParams::Harmonic {
                a1,
                a2,
                omega,
                b1,
                b2,
            }
        }
    };
    let total = n_support + n_query;
    let mut seen = HashSet::with_capacity(total);
    let mut xs = Vec::with_capacity(total);
    while xs.len() < total {
        let x: f64 = rng.gen_range(X_RANGE.0..=X_RANGE.1);
        if seen.insert(x.to_bits()) {
            xs.push(x);
        }
    }
    let noise = Normal::new(0.0, noise_sd).map_err(|e| invalid(e.to_string()))?;
    let points: Vec<Point> = xs
        .into_iter()
        .map(|x| {
            let eps = noise.sample(&mut rng);
            let clean = params.eval(x);
            Point {
                x,
                y: if noise_sd == 0.0 { clean } else { clean + eps },
            }
        })
        .collect();
    let query = points[n_support..].to_vec();
    let mut support = points;
    support.truncate(n_support);
    Ok(TaskInstance {
        params,
        support,
        query,
        noise_sd,
    })
}

/// Per-task generator settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskGenerator {
    pub family: TaskFamily,
    pub n_support: usize,
    pub n_query: usize,
    pub noise_sd: f64,
}

impl TaskGenerator {
    pub fn generate(&self, seed: u64) -> Result<TaskInstance> {
        generate(
            self.family,
            seed,
            self.n_support,
            self.n_query,
            self.noise_sd,
        )
    }
}

/// Task-specific subset used to describe and adapt to a task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaData {
    pub support: Vec<Point>,
    pub query: Vec<Point>,
    /// Smallest pairwise `x` distance among the chosen support points
    /// (0 for a single point).
    pub score: f64,
}

/// Picks which support points become meta-data.
pub trait SupportSampler {
    /// Returns `m` distinct indices into `xs`.
    fn select(&self, xs: &[f64], m: usize, rng: &mut dyn rand::RngCore) -> Vec<usize>;
}

/// Built-in samplers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Seeded subsample without replacement.
    #[default]
    Uniform,
    /// Greedy max-min spread over `x`.
    Scored,
}

impl std::str::FromStr for Strategy {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "scored" => Ok(Self::Scored),
            other => Err(invalid(format!("unknown metadata strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Scored => "scored",
        })
    }
}

impl SupportSampler for Strategy {
    fn select(&self, xs: &[f64], m: usize, rng: &mut dyn rand::RngCore) -> Vec<usize> {
        match self {
            Strategy::Uniform => index::sample(rng, xs.len(), m).into_vec(),
            Strategy::Scored => spread_select(xs, m, rng),
        }
    }
}

/// Farthest pair first, then repeatedly the point whose distance to the
/// chosen set is largest. Ties go to the lower index.
fn spread_select(xs: &[f64], m: usize, rng: &mut dyn rand::RngCore) -> Vec<usize> {
    let n = xs.len();
    if m == 0 || n == 0 {
        return Vec::new();
    }
    if m == 1 {
        return vec![rng.gen_range(0..n)];
    }
    let (mut lo, mut hi) = (0, 0);
    for i in 0..n {
        if xs[i] < xs[lo] {
            lo = i;
        }
        if xs[i] > xs[hi] {
            hi = i;
        }
    }
    if lo == hi {
        hi = if lo == 0 { 1 } else { 0 };
    }
    let mut chosen = vec![lo.min(hi), lo.max(hi)];
    let mut dist: Vec<f64> = xs
        .iter()
        .map(|&x| (x - xs[lo]).abs().min((x - xs[hi]).abs()))
        .collect();
    for &c in &chosen {
        dist[c] = f64::NEG_INFINITY;
    }
    while chosen.len() < m.min(n) {
        let mut best = None;
        for (i, &d) in dist.iter().enumerate() {
            if d == f64::NEG_INFINITY {
                continue;
            }
            if best.map_or(true, |b: usize| d > dist[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        chosen.push(b);
        for (i, d) in dist.iter_mut().enumerate() {
            if *d != f64::NEG_INFINITY {
                *d = d.min((xs[i] - xs[b]).abs());
            }
        }
        dist[b] = f64::NEG_INFINITY;
    }
    chosen
}

fn min_pairwise_distance(xs: &[f64]) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.min(d))))
        .unwrap_or(0.0)
}

fn sorted_by_x(mut pts: Vec<Point>) -> Vec<Point> {
    pts.sort_by(|a, b| a.x.total_cmp(&b.x));
    pts
}

/// Meta-data of `task`: `m_samples` support points chosen by `strategy`
/// and the whole query set, both sorted by `x`.
pub fn extract_metadata(
    task: &TaskInstance,
    strategy: &dyn SupportSampler,
    m_samples: usize,
    seed: u64,
) -> Result<MetaData> {
    if m_samples == 0 {
        return Err(invalid("m_samples must be at least 1"));
    }
    if m_samples > task.support.len() {
        return Err(invalid(format!(
            "m_samples {m_samples} exceeds support size {}",
            task.support.len()
        )));
    }
    let mut rng = seed::rng(seed);
    let xs: Vec<f64> = task.support.iter().map(|p| p.x).collect();
    let picked = strategy.select(&xs, m_samples, &mut rng);
    let support: Vec<Point> = picked.iter().map(|&i| task.support[i]).collect();
    let score = min_pairwise_distance(&support.iter().map(|p| p.x).collect::<Vec<_>>());
    Ok(MetaData {
        support: sorted_by_x(support),
        query: sorted_by_x(task.query.clone()),
        score,
    })
}

/// The tasks of one meta-batch; task `i` is bound to head `i`.
#[derive(Clone, Debug)]
pub struct TaskBatch {
    pub tasks: Vec<TaskInstance>,
    pub metadata: Vec<MetaData>,
    pub batch_seed: u64,
}

impl TaskBatch {
    pub fn new(tasks: Vec<TaskInstance>, metadata: Vec<MetaData>, batch_seed: u64) -> Result<Self> {
        if tasks.len() != metadata.len() {
            return Err(invalid("tasks and metadata lengths differ"));
        }
        Ok(Self {
            tasks,
            metadata,
            batch_seed,
        })
    }

    /// Builds meta-data for every task with `strategy`. `m_samples = None`
    /// keeps the whole support set.
    pub fn with_metadata(
        tasks: Vec<TaskInstance>,
        strategy: &dyn SupportSampler,
        m_samples: Option<usize>,
        batch_seed: u64,
    ) -> Result<Self> {
        let metadata = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let m = m_samples.unwrap_or(t.support.len()).min(t.support.len());
                extract_metadata(
                    t,
                    strategy,
                    m,
                    seed::derive(batch_seed, seed::stream::METADATA, i as u64),
                )
            })
            .collect::<Result<_>>()?;
        Self::new(tasks, metadata, batch_seed)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Where training batches come from.
pub trait TaskSource {
    /// The tasks of meta-batch `index`, `n` of them, plus the seed that
    /// drives any per-batch sampling.
    fn batch(&self, index: u64, n: usize) -> Result<(Vec<TaskInstance>, u64)>;
}

/// A fixed pool of pre-generated tasks; each batch draws `n` distinct
/// members.
#[derive(Clone, Debug)]
pub struct TaskPool {
    tasks: Vec<TaskInstance>,
    seed: u64,
}

impl TaskPool {
    pub fn generate(gen: &TaskGenerator, size: usize, seed: u64) -> Result<Self> {
        if size == 0 {
            return Err(invalid("task pool must not be empty"));
        }
        let tasks = (0..size as u64)
            .map(|k| gen.generate(seed::derive(seed, seed::stream::TRAIN_POOL, k)))
            .collect::<Result<_>>()?;
        Ok(Self { tasks, seed })
    }

    pub fn tasks(&self) -> &[TaskInstance] {
        &self.tasks
    }
}

impl TaskSource for TaskPool {
    fn batch(&self, index: u64, n: usize) -> Result<(Vec<TaskInstance>, u64)> {
        if n > self.tasks.len() {
            return Err(invalid(format!(
                "batch of {n} from a pool of {}",
                self.tasks.len()
            )));
        }
        let batch_seed = seed::derive(self.seed, seed::stream::BATCH, index);
        let mut rng = seed::rng(batch_seed);
        let picks = index::sample(&mut rng, self.tasks.len(), n);
        Ok((picks.iter().map(|i| self.tasks[i].clone()).collect(), batch_seed))
    }
}

/// A fresh task for every slot of every batch.
#[derive(Clone, Debug)]
pub struct TaskStream {
    pub gen: TaskGenerator,
    pub seed: u64,
}

impl TaskSource for TaskStream {
    fn batch(&self, index: u64, n: usize) -> Result<(Vec<TaskInstance>, u64)> {
        let batch_seed = seed::derive(self.seed, seed::stream::BATCH, index);
        let tasks = (0..n as u64)
            .map(|k| self.gen.generate(seed::derive(batch_seed, seed::stream::TRAIN_POOL, k)))
            .collect::<Result<_>>()?;
        Ok((tasks, batch_seed))
    }
}

/// Held-out tasks from a seed range disjoint from training.
pub fn held_out_tasks(
    gen: &TaskGenerator,
    count: usize,
    seed: u64,
    stream: u64,
) -> Result<Vec<TaskInstance>> {
    (0..count as u64)
        .map(|k| gen.generate(seed::derive(seed, stream, k)))
        .collect()
}

/// Writes one JSON object per task.
pub fn write_task_dump(path: &Path, tasks: &[TaskInstance]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in tasks {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_task_dump(path: &Path) -> Result<Vec<TaskInstance>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut tasks = Vec::new();
    for line in file.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            tasks.push(serde_json::from_str(&line)?);
        }
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sinusoid_task(a: f64, w: f64, b: f64, xs: &[f64]) -> TaskInstance {
        let params = TaskParams::Sinusoid {
            amplitude: a,
            frequency: w,
            offset: b,
        };
        TaskInstance {
            params,
            support: xs.iter().map(|&x| Point { x, y: params.eval(x) }).collect(),
            query: vec![Point { x: 9.0, y: 0.0 }],
            noise_sd: 0.0,
        }
    }

    #[test]
    fn sinusoid_at_half_pi() {
        let p = TaskParams::Sinusoid {
            amplitude: 1.0,
            frequency: 1.0,
            offset: 0.0,
        };
        assert_eq!(p.eval(std::f64::consts::FRAC_PI_2), 1.0);
    }

    #[test]
    fn sinusoid_parameter_ranges() {
        for s in 0..10_000 {
            let t = gen_sinusoid(s, 1, 1, 0.3).unwrap();
            let TaskParams::Sinusoid {
                amplitude,
                frequency,
                offset,
            } = t.params
            else {
                panic!("wrong family")
            };
            assert!((0.1..=5.0).contains(&amplitude));
            assert!((0.5..=2.0).contains(&frequency));
            assert!((0.0..=TAU).contains(&offset));
        }
    }

    #[test]
    fn harmonic_parameter_ranges() {
        for s in 0..10_000 {
            let t = gen_harmonic(s, 1, 1, 0.3).unwrap();
            let TaskParams::Harmonic { omega, b1, b2, .. } = t.params else {
                panic!("wrong family")
            };
            assert!(omega > 5.0 && omega < 7.0);
            assert!(b1 > 0.0 && b1 < TAU && b2 > 0.0 && b2 < TAU);
        }
    }

    #[test]
    fn harmonic_second_component_has_double_frequency() {
        let omega = 5.5;
        let p = TaskParams::Harmonic {
            a1: 0.0,
            a2: 1.0,
            omega,
            b1: 0.0,
            b2: 0.0,
        };
        for x in [-2.0, 0.3, 1.7] {
            assert_eq!(p.eval(x), (2.0 * omega * x).sin());
        }
        let silent = TaskParams::Harmonic {
            a1: 0.0,
            a2: 0.0,
            omega,
            b1: 1.0,
            b2: 2.0,
        };
        assert!([-4.0, 0.0, 3.3].iter().all(|&x| silent.eval(x) == 0.0));
    }

    #[test]
    fn noise_free_tasks_are_exact() {
        for s in 0..50 {
            for fam in [TaskFamily::Sinusoid, TaskFamily::Harmonic] {
                let t = generate(fam, s, 10, 15, 0.0).unwrap();
                for p in t.support.iter().chain(&t.query) {
                    assert_eq!(p.y, t.params.eval(p.x));
                    assert!((X_RANGE.0..=X_RANGE.1).contains(&p.x));
                }
            }
        }
    }

    #[test]
    fn support_and_query_are_disjoint() {
        for s in 0..200 {
            let t = gen_sinusoid(s, 10, 10, 0.3).unwrap();
            assert_eq!(t.support.len(), 10);
            assert_eq!(t.query.len(), 10);
            for q in &t.query {
                assert!(t.support.iter().all(|p| p.x != q.x));
            }
        }
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(gen_sinusoid(5, 5, 5, 0.3).unwrap(), gen_sinusoid(5, 5, 5, 0.3).unwrap());
        assert_ne!(
            gen_sinusoid(5, 5, 5, 0.3).unwrap().params,
            gen_sinusoid(6, 5, 5, 0.3).unwrap().params
        );
    }

    #[test]
    fn bad_arguments_rejected() {
        assert!(gen_sinusoid(0, 5, 5, -0.1).is_err());
        assert!(gen_harmonic(0, 0, 5, 0.1).is_err());
        assert!(gen_harmonic(0, 5, 0, 0.1).is_err());
    }

    #[test]
    fn full_uniform_metadata_is_the_support_set() {
        let t = gen_sinusoid(3, 10, 5, 0.3).unwrap();
        let md = extract_metadata(&t, &Strategy::Uniform, 10, 1).unwrap();
        assert_eq!(md.support, sorted_by_x(t.support.clone()));
        assert_eq!(md.query, sorted_by_x(t.query.clone()));
    }

    #[test]
    fn scored_prefers_spread() {
        let t = sinusoid_task(1.0, 1.0, 0.0, &[0.0, 0.01, 5.0]);
        let md = extract_metadata(&t, &Strategy::Scored, 2, 0).unwrap();
        let xs: Vec<f64> = md.support.iter().map(|p| p.x).collect();
        assert_eq!(xs, vec![0.0, 5.0]);
        assert_eq!(md.score, 5.0);
    }

    #[test]
    fn scored_matches_brute_force_for_pairs() {
        use itertools_free_pairs as pairs;
        for s in 0..50 {
            let t = gen_sinusoid(s, 7, 1, 0.0).unwrap();
            let xs: Vec<f64> = t.support.iter().map(|p| p.x).collect();
            let best = pairs(&xs);
            let md = extract_metadata(&t, &Strategy::Scored, 2, s).unwrap();
            assert_eq!(md.score, best);
        }
    }

    fn itertools_free_pairs(xs: &[f64]) -> f64 {
        let mut best = 0.0f64;
        for i in 0..xs.len() {
            for j in i + 1..xs.len() {
                best = best.max((xs[i] - xs[j]).abs());
            }
        }
        best
    }

    #[test]
    fn metadata_is_seeded_subset() {
        let t = gen_harmonic(8, 10, 4, 0.3).unwrap();
        for strat in [Strategy::Uniform, Strategy::Scored] {
            let a = extract_metadata(&t, &strat, 4, 77).unwrap();
            let b = extract_metadata(&t, &strat, 4, 77).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.support.len(), 4);
            assert!(a.support.iter().all(|p| t.support.contains(p)));
            assert!(a.query.iter().all(|p| t.query.contains(p)));
        }
    }

    #[test]
    fn metadata_size_checks() {
        let t = gen_sinusoid(1, 3, 3, 0.3).unwrap();
        assert!(extract_metadata(&t, &Strategy::Uniform, 0, 0).is_err());
        assert!(extract_metadata(&t, &Strategy::Uniform, 4, 0).is_err());
    }

    #[test]
    fn pool_batches_are_distinct_and_reproducible() {
        let gen = TaskGenerator {
            family: TaskFamily::Sinusoid,
            n_support: 5,
            n_query: 5,
            noise_sd: 0.3,
        };
        let pool = TaskPool::generate(&gen, 20, 9).unwrap();
        let (a, sa) = pool.batch(3, 4).unwrap();
        let (b, sb) = pool.batch(3, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(a[i], a[j]);
            }
        }
        assert!(pool.batch(0, 21).is_err());
    }

    #[test]
    fn task_dump_round_trip() {
        let tasks = vec![
            gen_sinusoid(1, 3, 2, 0.3).unwrap(),
            gen_harmonic(2, 3, 2, 0.3).unwrap(),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.jsonl");
        write_task_dump(&path, &tasks).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("{\"params\":{\"family\":\"sinusoid\""));
        assert_eq!(read_task_dump(&path).unwrap(), tasks);
    }
}
