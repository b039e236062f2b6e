//! `gbmap` command-line interface.
//!
//! Exit codes: 0 success, 2 bad arguments, 3 data errors, 4 numeric failures.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gbmap::{FitConfig, GbmapError, TaskKind};

#[derive(Parser)]
#[command(name = "gbmap", version, about = "Gradient boosting mapping: fit, embed, explain and detect drift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model on a CSV file and save it as JSON.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        hyper: HyperArgs,
        #[arg(long)]
        out_model: PathBuf,
    },
    /// Predictions (with class probabilities for classifiers).
    Predict(ApplyArgs),
    /// Embedding coordinates, one column per stage.
    Embed(ApplyArgs),
    /// Embedding and path distances between listed row pairs.
    Distance {
        #[command(flatten)]
        apply: ApplyArgs,
        /// Comma-separated 0-based row pairs, e.g. `0:1,4:9`.
        #[arg(long, value_delimiter = ',', required = true)]
        pairs: Vec<String>,
        /// Midpoint-rule grid size for the path distance.
        #[arg(long, default_value_t = 1000)]
        grid: usize,
    },
    /// Local linear coefficients (the model gradient) per row.
    Explain(ApplyArgs),
    /// Build a drift-inducing split and evaluate both drift indicators.
    Drift {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        hyper: HyperArgs,
        #[arg(long, default_value_t = gbmap::drift::DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = gbmap::drift::DEFAULT_QUANTILE)]
        quantile: f64,
        /// Report JSON; ROC curves go next to it as `<stem>_gbmap_roc.csv` and `<stem>_euclid_roc.csv`.
        #[arg(long)]
        out_report: PathBuf,
    },
    /// Write a synthetic dataset as CSV plus a JSON metadata sidecar.
    Synth {
        #[arg(long, value_enum, default_value_t = SynthKind::Cos)]
        kind: SynthKind,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        p: usize,
        #[arg(long, default_value_t = 5.0)]
        alpha: f64,
        #[arg(long, default_value = "regression")]
        task: TaskKind,
        /// Irrelevant columns of the drift fixture.
        #[arg(long, default_value_t = 4)]
        noise_columns: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated train/test comparison of GBMAP against linear and kNN baselines.
    Benchmark {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        hyper: HyperArgs,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0.5)]
        train_fraction: f64,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Random-search budget for tuning on each training half (0 uses the given hyperparameters).
        #[arg(long, default_value_t = 0)]
        search_budget: usize,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        /// Optional CSV with one row per repeat.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two-component PCA of the cluster dataset in embedding and original space.
    Vis {
        #[arg(long, default_value_t = 10)]
        m: usize,
        #[arg(long, default_value_t = 5.0)]
        beta: f64,
        #[arg(long, default_value_t = 1e-3)]
        lambda: f64,
        #[arg(long, default_value_t = 200)]
        maxiter: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Cos,
    Cluster,
    Drift,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "y")]
    target: String,
    /// Inferred from the targets when omitted: all values in {-1,+1} means classification.
    #[arg(long)]
    task: Option<TaskKind>,
    /// Comma-separated names of categorical columns.
    #[arg(long, value_delimiter = ',')]
    categorical: Vec<String>,
}

#[derive(Args)]
struct HyperArgs {
    #[arg(long, default_value_t = 20)]
    m: usize,
    #[arg(long, default_value_t = 5.0)]
    beta: f64,
    #[arg(long, default_value_t = 1e-3)]
    lambda: f64,
    #[arg(long, default_value_t = 200)]
    maxiter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl HyperArgs {
    fn config(&self, task: TaskKind) -> FitConfig {
        let base = FitConfig::new(task);
        FitConfig {
            m: self.m,
            beta: self.beta,
            lambda: self.lambda,
            seed: self.seed,
            optimizer: base.optimizer.clone().with_max_iterations(self.maxiter),
            ..base
        }
    }
}

#[derive(Args)]
struct ApplyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Target column to ignore if present.
    #[arg(long, default_value = "y")]
    target: String,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<GbmapError>() {
            return match e {
                GbmapError::InvalidArgument(_) => 2,
                GbmapError::Ingest { .. }
                | GbmapError::Data(_)
                | GbmapError::Io(_)
                | GbmapError::Csv(_)
                | GbmapError::Json(_) => 3,
                GbmapError::Numeric(_) | GbmapError::Undefined(_) | GbmapError::InvalidState(_) => 4,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Fit { data, hyper, out_model } => commands::fit(&data, &hyper, &out_model),
        Command::Predict(a) => commands::predict(&a),
        Command::Embed(a) => commands::embed(&a),
        Command::Distance { apply, pairs, grid } => commands::distance(&apply, &pairs, grid),
        Command::Explain(a) => commands::explain(&a),
        Command::Drift { data, hyper, k, quantile, out_report } => {
            commands::drift(&data, &hyper, k, quantile, &out_report)
        }
        Command::Synth { kind, n, p, alpha, task, noise_columns, seed, out } => {
            commands::synth(kind, n, p, alpha, task, noise_columns, seed, &out)
        }
        Command::Benchmark { data, hyper, repeats, train_fraction, k, search_budget, folds, out } => {
            let opts = commands::BenchmarkOptions { repeats, train_fraction, k, search_budget, folds };
            commands::benchmark(&data, &hyper, &opts, out.as_deref())
        }
        Command::Vis { m, beta, lambda, maxiter, seed, out_dir } => {
            let hyper = HyperArgs { m, beta, lambda, maxiter, seed };
            commands::vis(&hyper, &out_dir)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
