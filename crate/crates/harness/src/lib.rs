//! Experiment runner for `trl-core`: config files, seeded multi-run
//! benchmarks, lambda sweeps, the learned-vs-fixed relation ablation, and
//! CSV / JSON-lines / SVG reports.

pub mod bench;
pub mod config;
pub mod error;
pub mod svg;

pub use bench::{ablate_matrix, bench, export_heatmaps, run_benchmark, sweep_lambda, Benchmark, ResultRow};
pub use config::{parse_config, ExperimentSpec};
pub use error::{HarnessError, Result};
