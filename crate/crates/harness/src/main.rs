use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trl_harness::bench::{read_log, LAMBDA_GRID};
use trl_harness::{ablate_matrix, bench, export_heatmaps, parse_config, sweep_lambda, HarnessError};

#[derive(Parser, Debug)]
#[command(name = "trl", version, about = "Meta-learning benchmarks with relation-aware consistency")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and evaluate `runs` seeds of one configuration.
    Bench,
    /// One benchmark per lambda value.
    SweepLambda {
        /// Comma-separated grid.
        #[arg(long, value_delimiter = ',', default_values_t = LAMBDA_GRID)]
        values: Vec<f64>,
    },
    /// Learned vs fixed relation matrix on paired seeds.
    AblateMatrix,
    /// Render relation matrix snapshots from a training log.
    Heatmap {
        /// Defaults to `<out>/log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
}

#[derive(Args, Debug)]
struct Flags {
    /// Flat `key = value` file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<String>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    shots: Option<String>,
    #[arg(long, global = true)]
    method: Option<String>,
    /// on/off; bare flag means on.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    trlearner: Option<String>,
    #[arg(long, global = true)]
    matrix_mode: Option<String>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    lambda: Option<String>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    alpha: Option<String>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    beta: Option<String>,
    /// Similarity heads K.
    #[arg(long, global = true, allow_negative_numbers = true)]
    heads: Option<String>,
    /// Tasks per meta-batch.
    #[arg(long, global = true, allow_negative_numbers = true)]
    batch_tasks: Option<String>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    inner_steps: Option<String>,
    #[arg(long, global = true)]
    first_order: bool,
    #[arg(long, global = true, allow_negative_numbers = true)]
    runs: Option<String>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    seed: Option<String>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    epochs: Option<String>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    batches_per_epoch: Option<String>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Any config key, `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Flags {
    fn overrides(&self) -> Result<Vec<(String, String)>, HarnessError> {
        let named = [
            ("dataset", &self.dataset),
            ("shots", &self.shots),
            ("method", &self.method),
            ("trlearner", &self.trlearner),
            ("matrix_mode", &self.matrix_mode),
            ("lambda", &self.lambda),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("heads", &self.heads),
            ("batch_tasks", &self.batch_tasks),
            ("inner_steps", &self.inner_steps),
            ("runs", &self.runs),
            ("seed", &self.seed),
            ("epochs", &self.epochs),
            ("batches_per_epoch", &self.batches_per_epoch),
        ];
        let mut out: Vec<(String, String)> = Vec::new();
        let mut bad = Vec::new();
        for kv in &self.set {
            match kv.split_once('=') {
                Some((k, v)) => out.push((k.trim().to_string(), v.to_string())),
                None => bad.push(("set".to_string(), format!("expected key=value, got {kv:?}"))),
            }
        }
        out.extend(
            named
                .into_iter()
                .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone()))),
        );
        if self.first_order {
            out.push(("first_order".into(), "true".into()));
        }
        if bad.is_empty() {
            Ok(out)
        } else {
            Err(HarnessError::Config(bad))
        }
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let mut spec = parse_config(cli.flags.config.as_deref(), &cli.flags.overrides()?)?;
    if let Some(out) = cli.flags.out {
        spec.out = out;
    }
    match cli.command {
        Command::Bench => {
            let b = bench(&spec)?;
            if let Some(row) = &b.row {
                println!("{}", row.summary());
            }
        }
        Command::SweepLambda { values } => {
            for row in sweep_lambda(&spec, &values)? {
                println!("lambda {}: {}", row.spec.meta.lambda, row.summary());
            }
        }
        Command::AblateMatrix => {
            let a = ablate_matrix(&spec)?;
            for row in [&a.learned.row, &a.fixed.row].into_iter().flatten() {
                println!("{} {}", row.spec.meta.matrix_mode, row.summary());
            }
        }
        Command::Heatmap { log, run } => {
            let path = log.unwrap_or_else(|| spec.out.join("log.jsonl"));
            let training_log = read_log(&path, run)?;
            std::fs::create_dir_all(&spec.out)?;
            for p in export_heatmaps(&training_log, &spec.out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
