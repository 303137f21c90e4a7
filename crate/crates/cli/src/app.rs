//! Argument definitions and command dispatch.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dgp_core::model::DEFAULT_SAMPLES;
use dgp_core::{MeanVariant, ModelConfig, ModelKind, TrainConfig, VarVariant, Variants};

use crate::benchmark::{self, BenchmarkSpec};
use crate::dataset::{self, DatasetRef};
use crate::error::{CliError, CliResult};
use crate::experiment::{self as exp, ExperimentSpec};
use crate::gradcheck::{self, GradcheckSpec};
use crate::run;

#[derive(Debug, Parser)]
#[command(name = "dgp", version, about = "Deep Gaussian processes with decoupled inducing inputs")]
pub struct Cli {
    /// Standard output style; `csv` applies to `benchmark` only.
    #[arg(long, value_enum, default_value_t = OutputFormat::Table, global = true)]
    pub format: OutputFormat,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Table,
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit repeated train/test splits and report test LL and RMSE.
    Train(TrainArgs),
    /// Recompute test metrics for a saved run, checkpoint or model.
    Evaluate(EvaluateArgs),
    /// Median per-step training time over a grid of model sizes.
    Benchmark(BenchmarkArgs),
    /// Compare ELBO gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

/// Flags understood by every command. Size, depth, width and batch flags
/// take comma-separated lists for `benchmark` and a single value elsewhere.
#[derive(Debug, Clone, Default, Args)]
pub struct Shared {
    /// Manifest entry, builtin name (sinusoid, step, linear, kin8nm-sim, molecules-sim) or CSV path.
    #[arg(long)]
    pub dataset: Option<String>,
    /// key=value dataset manifest; defaults to manifest.txt in the data directory.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// coupled or decoupled.
    #[arg(long, value_delimiter = ',')]
    pub model: Vec<ModelKind>,
    /// Inducing points per layer (coupled).
    #[arg(long, value_delimiter = ',')]
    pub m: Vec<usize>,
    /// Mean inducing points per layer (decoupled).
    #[arg(long, value_delimiter = ',')]
    pub ma: Vec<usize>,
    /// Variance inducing points per layer (decoupled).
    #[arg(long, value_delimiter = ',')]
    pub mb: Vec<usize>,
    /// Hidden layers (0..=4).
    #[arg(long, value_delimiter = ',')]
    pub depth: Vec<usize>,
    /// Hidden layer width.
    #[arg(long, value_delimiter = ',')]
    pub width: Vec<usize>,
    /// cb, gp or gpcent.
    #[arg(long)]
    pub mean_variant: Option<MeanVariant>,
    /// cb or gp.
    #[arg(long)]
    pub var_variant: Option<VarVariant>,
    /// Passes over the training set (default 5000).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate (default 0.01).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Minibatch size; default min(N, 10000).
    #[arg(long, value_delimiter = ',')]
    pub batch: Vec<usize>,
    /// Independent train/test splits (default 5).
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Root seed for splits, initialization, minibatches and sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (train) or file (other commands).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Test-time sample paths.
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub shared: Shared,
    /// Fraction of rows held out for testing.
    #[arg(long, default_value_t = exp::DEFAULT_TEST_FRACTION)]
    pub test_fraction: f64,
    /// Worker threads for repeats; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Continue a saved run record (repeat-<i>.json) up to --epochs.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Run record, checkpoint or model document.
    pub path: PathBuf,
    #[command(flatten)]
    pub shared: Shared,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub shared: Shared,
    /// Rows of the synthetic dataset.
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Input dimension of the synthetic dataset.
    #[arg(long, default_value_t = 8)]
    pub d: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    #[arg(long, default_value_t = 5)]
    pub iters: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub shared: Shared,
    /// Data points (at most 32).
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    /// Finite-difference step is h0 * (1 + |theta|).
    #[arg(long, default_value_t = 1e-4)]
    pub h0: f64,
    /// Parameter perturbation applied after initialization.
    #[arg(long, default_value_t = gradcheck::DEFAULT_PERTURBATION)]
    pub perturb: f64,
}

/// What a command produced: text for standard output, and the failure
/// that decides the exit code if the command ran but did not succeed.
#[derive(Debug)]
pub struct Outcome {
    pub stdout: String,
    pub failure: Option<CliError>,
}

fn one<T: Copy>(values: &[T], flag: &str, default: T) -> CliResult<T> {
    match values {
        [] => Ok(default),
        [v] => Ok(*v),
        _ => Err(CliError::config(format!("--{flag} takes a single value here"))),
    }
}

fn variants(s: &Shared) -> Variants {
    Variants {
        mean: s.mean_variant.unwrap_or(MeanVariant::GpCent),
        var: s.var_variant.unwrap_or(VarVariant::Gp),
    }
}

/// Single-architecture config with the given size defaults.
fn model_config(s: &Shared, m: usize, ma: usize, mb: usize) -> CliResult<ModelConfig> {
    let kind = one(&s.model, "model", ModelKind::Decoupled)?;
    let depth = one(&s.depth, "depth", exp::DEFAULT_DEPTH)?;
    let width = one(&s.width, "width", exp::DEFAULT_WIDTH)?;
    let v = variants(s);
    let cfg = match kind {
        ModelKind::Coupled => ModelConfig::coupled(one(&s.m, "m", m)?, depth, width),
        ModelKind::Decoupled => ModelConfig::decoupled(one(&s.ma, "ma", ma)?, one(&s.mb, "mb", mb)?, depth, width, v.mean, v.var),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_dataset(s: &Shared, default: Option<&str>) -> CliResult<DatasetRef> {
    let name = s
        .dataset
        .as_deref()
        .or(default)
        .ok_or_else(|| CliError::config("--dataset is required"))?;
    dataset::resolve(name, s.manifest.as_deref(), &dataset::default_data_dir())
}

pub fn experiment_from(args: &TrainArgs) -> CliResult<ExperimentSpec> {
    let s = &args.shared;
    let defaults = TrainConfig::default();
    let spec = ExperimentSpec {
        dataset: resolve_dataset(s, None)?,
        model: model_config(s, exp::DEFAULT_M, exp::DEFAULT_M_A, exp::DEFAULT_M_B)?,
        train: TrainConfig {
            epochs: s.epochs.unwrap_or(defaults.epochs),
            learning_rate: s.lr.unwrap_or(defaults.learning_rate),
            batch_size: match s.batch.as_slice() {
                [] => None,
                [b] => Some(*b),
                _ => return Err(CliError::config("--batch takes a single value here")),
            },
            ..defaults
        },
        repeats: s.repeats.unwrap_or(exp::DEFAULT_REPEATS),
        seed: s.seed.unwrap_or(0),
        samples: s.samples.unwrap_or(DEFAULT_SAMPLES),
        test_fraction: args.test_fraction,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn benchmark_from(args: &BenchmarkArgs) -> CliResult<BenchmarkSpec> {
    let s = &args.shared;
    let or = |v: &[usize], d: usize| if v.is_empty() { vec![d] } else { v.to_vec() };
    let kinds = if s.model.is_empty() {
        vec![ModelKind::Coupled, ModelKind::Decoupled]
    } else {
        s.model.clone()
    };
    let configs = benchmark::grid(
        &kinds,
        &or(&s.m, exp::DEFAULT_M),
        &or(&s.ma, exp::DEFAULT_M_A),
        &or(&s.mb, exp::DEFAULT_M_B),
        &or(&s.depth, exp::DEFAULT_DEPTH),
        &or(&s.width, exp::DEFAULT_WIDTH),
        variants(s),
    );
    Ok(BenchmarkSpec {
        n: args.n,
        d: args.d,
        seed: s.seed.unwrap_or(0),
        warmup: args.warmup,
        iterations: args.iters,
        configs,
        batches: or(&s.batch, args.n.min(dgp_core::train::MAX_BATCH)),
    })
}

pub fn gradcheck_from(args: &GradcheckArgs) -> CliResult<GradcheckSpec> {
    let s = &args.shared;
    Ok(GradcheckSpec {
        dataset: resolve_dataset(s, Some("kin8nm-sim"))?,
        model: model_config(s, 8, 8, 4)?,
        n: args.n,
        seed: s.seed.unwrap_or(0),
        tolerance: args.tolerance,
        h0: args.h0,
        perturbation: args.perturb,
    })
}

fn json<T: serde::Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| CliError::io(e.to_string()))
}

fn write_out(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

fn no_csv(format: OutputFormat) -> CliResult<()> {
    match format {
        OutputFormat::Csv => Err(CliError::config("--format csv is only available for benchmark")),
        _ => Ok(()),
    }
}

/// Run a parsed command line.
pub fn run(cli: &Cli) -> CliResult<Outcome> {
    let fmt = cli.format;
    match &cli.command {
        Command::Train(args) => {
            no_csv(fmt)?;
            let report = match &args.resume {
                Some(path) => run::resume(path, args.shared.epochs, args.shared.out.as_deref())?,
                None => run::train(&experiment_from(args)?, args.shared.out.as_deref(), args.jobs)?,
            };
            let stdout = match fmt {
                OutputFormat::Json => json(&report)?,
                _ => report.render(),
            };
            Ok(Outcome {
                stdout,
                failure: report.failure(),
            })
        }
        Command::Evaluate(args) => {
            no_csv(fmt)?;
            let s = &args.shared;
            let dataset = match &s.dataset {
                Some(_) => Some(resolve_dataset(s, None)?),
                None => None,
            };
            let report = run::evaluate(&args.path, dataset, s.samples, s.seed)?;
            if let Some(out) = &s.out {
                write_out(out, &json(&report)?)?;
            }
            let stdout = match fmt {
                OutputFormat::Json => json(&report)?,
                _ => report.render(),
            };
            Ok(Outcome { stdout, failure: None })
        }
        Command::Benchmark(args) => {
            let report = benchmark::benchmark(&benchmark_from(args)?)?;
            if let Some(out) = &args.shared.out {
                let text = if out.extension().is_some_and(|e| e == "json") {
                    json(&report)?
                } else {
                    report.to_csv()
                };
                write_out(out, &text)?;
            }
            let stdout = match fmt {
                OutputFormat::Json => json(&report)?,
                OutputFormat::Csv => report.to_csv(),
                OutputFormat::Table => report.render(),
            };
            Ok(Outcome { stdout, failure: None })
        }
        Command::Gradcheck(args) => {
            no_csv(fmt)?;
            let report = gradcheck::gradcheck(&gradcheck_from(args)?)?;
            if let Some(out) = &args.shared.out {
                write_out(out, &json(&report)?)?;
            }
            let stdout = match fmt {
                OutputFormat::Json => json(&report)?,
                _ => report.render(),
            };
            Ok(Outcome {
                stdout,
                failure: report.failure(),
            })
        }
    }
}
