//! `train` and `evaluate`: repeated fits on seeded splits, per-repeat run
//! records and the aggregate report.

use std::path::{Path, PathBuf};
use std::time::Instant;

use dgp_core::data::split;
use dgp_core::model::DEFAULT_SAMPLES;
use dgp_core::{Checkpoint, Dataset, DgpModel, ModelDocument, Normalizer, SplitSpec, TestMetrics, Trainer};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetRef;
use crate::error::{CliError, CliResult, FailureKind};
use crate::experiment::{ExperimentSpec, RepeatSeeds};
use crate::format::{mean_std, sig6, Table};

pub const RUN_FORMAT: &str = "dgp-run";
pub const RUN_VERSION: u32 = 1;
pub const REPORT_FORMAT: &str = "dgp-report";
pub const REPORT_VERSION: u32 = 1;
pub const EVALUATION_FORMAT: &str = "dgp-evaluation";

/// One trained repeat: enough to evaluate it again or resume training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format: String,
    pub version: u32,
    pub experiment: ExperimentSpec,
    pub repeat: usize,
    pub seeds: RepeatSeeds,
    pub metrics: Option<TestMetrics>,
    pub checkpoint: Checkpoint,
}

impl RunRecord {
    pub fn to_json(&self) -> CliResult<String> {
        serde_json::to_string(self).map_err(|e| CliError::io(e.to_string()))
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let r: RunRecord = serde_json::from_str(text).map_err(|e| CliError::ingestion(format!("bad run record: {e}")))?;
        if r.format != RUN_FORMAT || r.version != RUN_VERSION {
            return Err(CliError::ingestion(format!(
                "unsupported run record {} v{} (expected {RUN_FORMAT} v{RUN_VERSION})",
                r.format, r.version
            )));
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub kind: FailureKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatOutcome {
    pub repeat: usize,
    pub seeds: RepeatSeeds,
    pub n_train: usize,
    pub n_test: usize,
    pub epochs_completed: usize,
    /// Mean minibatch ELBO of the last epoch.
    pub final_elbo: Option<f64>,
    /// Training wall-clock time, evaluation excluded.
    pub runtime_secs: f64,
    pub metrics: Option<TestMetrics>,
    pub failure: Option<Failure>,
    pub record: Option<PathBuf>,
}

/// Sample mean and standard deviation (`n - 1` denominator; undefined for one value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: Option<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Some(Summary { mean, std })
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[k] } else { 0.5 * (v[k - 1] + v[k]) })
}

/// Statistics over the successful repeats only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub successes: usize,
    pub failures: usize,
    pub mean_ll: Option<Summary>,
    pub rmse: Option<Summary>,
    pub median_runtime_secs: Option<f64>,
}

impl Aggregate {
    pub fn from_outcomes(outcomes: &[RepeatOutcome]) -> Self {
        let ok: Vec<&TestMetrics> = outcomes.iter().filter(|o| o.failure.is_none()).filter_map(|o| o.metrics.as_ref()).collect();
        let runtimes: Vec<f64> = outcomes.iter().filter(|o| o.failure.is_none()).map(|o| o.runtime_secs).collect();
        Aggregate {
            successes: ok.len(),
            failures: outcomes.len() - ok.len(),
            mean_ll: Summary::of(&ok.iter().map(|m| m.mean_ll).collect::<Vec<_>>()),
            rmse: Summary::of(&ok.iter().map(|m| m.rmse).collect::<Vec<_>>()),
            median_runtime_secs: median(&runtimes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub version: u32,
    pub experiment: ExperimentSpec,
    pub repeats: Vec<RepeatOutcome>,
    pub aggregate: Aggregate,
}

impl MetricsReport {
    pub fn new(experiment: ExperimentSpec, repeats: Vec<RepeatOutcome>) -> Self {
        MetricsReport {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION,
            aggregate: Aggregate::from_outcomes(&repeats),
            experiment,
            repeats,
        }
    }

    /// First failed repeat, as an error for the exit code.
    pub fn failure(&self) -> Option<CliError> {
        self.repeats.iter().find_map(|o| {
            o.failure
                .as_ref()
                .map(|f| CliError::new(f.kind, format!("repeat {} failed: {}", o.repeat, f.message)))
        })
    }

    pub fn render(&self) -> String {
        let e = &self.experiment;
        let mut out = format!(
            "dataset {}  {}  epochs={} lr={} seed={} samples={}\n\n",
            e.dataset.name,
            e.describe_model(),
            e.train.epochs,
            sig6(e.train.learning_rate),
            e.seed,
            e.samples
        );
        let mut t = Table::new(["repeat", "test LL", "RMSE", "final ELBO", "runtime (s)", "status"]);
        let opt = |v: Option<f64>| v.map(sig6).unwrap_or_else(|| "-".into());
        for o in &self.repeats {
            t.push(vec![
                o.repeat.to_string(),
                opt(o.metrics.map(|m| m.mean_ll)),
                opt(o.metrics.map(|m| m.rmse)),
                opt(o.final_elbo),
                sig6(o.runtime_secs),
                match &o.failure {
                    None => "ok".into(),
                    Some(f) => format!("failed ({})", f.kind.name()),
                },
            ]);
        }
        let a = &self.aggregate;
        let summary = |s: Option<Summary>| s.map(|s| mean_std(s.mean, s.std)).unwrap_or_else(|| "-".into());
        t.push(vec![
            "mean ± std".into(),
            summary(a.mean_ll),
            summary(a.rmse),
            String::new(),
            opt(a.median_runtime_secs) + " (median)",
            format!("{}/{} ok", a.successes, a.successes + a.failures),
        ]);
        out.push_str(&t.render());
        for o in &self.repeats {
            if let Some(f) = &o.failure {
                out.push_str(&format!("repeat {}: {}\n", o.repeat, f.message));
            }
        }
        out
    }
}

fn outcome_failure(e: CliError) -> Failure {
    Failure {
        kind: e.kind,
        message: e.message,
    }
}

/// Train and evaluate one repeat.
pub fn run_repeat(spec: &ExperimentSpec, data: &Dataset, repeat: usize) -> (RepeatOutcome, Option<RunRecord>) {
    let seeds = spec.seeds(repeat);
    let mut outcome = RepeatOutcome {
        repeat,
        seeds,
        n_train: 0,
        n_test: 0,
        epochs_completed: 0,
        final_elbo: None,
        runtime_secs: 0.0,
        metrics: None,
        failure: None,
        record: None,
    };
    let prepared = (|| -> CliResult<_> {
        let (train, test) = split(data, &spec.split(repeat)?);
        let norm = Normalizer::fit(&train);
        let train_n = norm.apply(&train)?;
        let model = DgpModel::init(&spec.model, &train_n.x, train_n.y.ncols(), seeds.init)?;
        let mut trainer = Trainer::new(model, spec.train_config(repeat))?;
        trainer.normalizer = Some(norm);
        Ok((trainer, train_n, test))
    })();
    let (mut trainer, train_n, test) = match prepared {
        Ok(p) => p,
        Err(e) => {
            outcome.failure = Some(outcome_failure(e));
            return (outcome, None);
        }
    };
    outcome.n_train = train_n.len();
    outcome.n_test = test.len();
    let (result, runtime) = timed(|| trainer.run(&train_n.x, &train_n.y));
    outcome.runtime_secs = runtime;
    finish(spec, repeat, &mut trainer, &test, result.map_err(|a| CliError::from(a.error)), outcome)
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed().as_secs_f64())
}

/// Evaluate after training (or record the failure) and build the run record.
fn finish(
    spec: &ExperimentSpec,
    repeat: usize,
    trainer: &mut Trainer,
    test: &Dataset,
    result: CliResult<()>,
    mut outcome: RepeatOutcome,
) -> (RepeatOutcome, Option<RunRecord>) {
    outcome.epochs_completed = trainer.epochs_completed;
    outcome.final_elbo = trainer.history.elbo.last().copied();
    let seeds = outcome.seeds;
    let metrics = result.and_then(|()| {
        Ok(trainer
            .model
            .evaluate(&test.x, &test.y, spec.samples, seeds.eval, trainer.normalizer.as_ref())?)
    });
    match metrics {
        Ok(m) => outcome.metrics = Some(m),
        Err(e) => outcome.failure = Some(outcome_failure(e)),
    }
    let record = RunRecord {
        format: RUN_FORMAT.into(),
        version: RUN_VERSION,
        experiment: spec.clone(),
        repeat,
        seeds,
        metrics: outcome.metrics,
        checkpoint: trainer.checkpoint(),
    };
    (outcome, Some(record))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

fn save_records(out: Option<&Path>, results: Vec<(RepeatOutcome, Option<RunRecord>)>) -> CliResult<Vec<RepeatOutcome>> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("cannot create {}: {e}", dir.display())))?;
    }
    let mut outcomes = Vec::with_capacity(results.len());
    for (mut o, rec) in results {
        if let (Some(dir), Some(rec)) = (out, rec) {
            let path = dir.join(format!("repeat-{}.json", o.repeat));
            write_file(&path, &rec.to_json()?)?;
            o.record = Some(path);
        }
        outcomes.push(o);
    }
    Ok(outcomes)
}

/// Write `report.json` next to the run records.
pub fn save_report(out: &Path, report: &MetricsReport) -> CliResult<PathBuf> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(format!("cannot create {}: {e}", out.display())))?;
    let path = out.join("report.json");
    write_file(&path, &serde_json::to_string_pretty(report).map_err(|e| CliError::io(e.to_string()))?)?;
    Ok(path)
}

/// All repeats of an experiment. `jobs = 0` uses every core; results do
/// not depend on `jobs`.
pub fn train(spec: &ExperimentSpec, out: Option<&Path>, jobs: usize) -> CliResult<MetricsReport> {
    spec.validate()?;
    let data = spec.dataset.load()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    let results: Vec<_> = pool.install(|| (0..spec.repeats).into_par_iter().map(|r| run_repeat(spec, &data, r)).collect());
    let outcomes = save_records(out, results)?;
    let report = MetricsReport::new(spec.clone(), outcomes);
    if let Some(dir) = out {
        save_report(dir, &report)?;
    }
    Ok(report)
}

/// Continue a saved repeat up to `epochs` total epochs (default: the
/// record's own budget). The record is rewritten when `out` is given.
pub fn resume(path: &Path, epochs: Option<usize>, out: Option<&Path>) -> CliResult<MetricsReport> {
    let text = read(path)?;
    let record = RunRecord::from_json(&text)?;
    let mut spec = record.experiment.clone();
    if let Some(e) = epochs {
        spec.train.epochs = e;
    }
    spec.validate()?;
    let data = spec.dataset.load()?;
    let (train_set, test) = split(&data, &spec.split(record.repeat)?);
    let mut trainer = Trainer::from_checkpoint(record.checkpoint)?;
    trainer.config.epochs = spec.train.epochs;
    let norm = trainer
        .normalizer
        .clone()
        .ok_or_else(|| CliError::ingestion("run record has no normalizer"))?;
    let train_n = norm.apply(&train_set)?;
    let outcome = RepeatOutcome {
        repeat: record.repeat,
        seeds: record.seeds,
        n_train: train_n.len(),
        n_test: test.len(),
        epochs_completed: 0,
        final_elbo: None,
        runtime_secs: 0.0,
        metrics: None,
        failure: None,
        record: None,
    };
    let (result, runtime) = timed(|| trainer.run(&train_n.x, &train_n.y));
    let outcome = RepeatOutcome {
        runtime_secs: runtime,
        ..outcome
    };
    let result = finish(&spec, record.repeat, &mut trainer, &test, result.map_err(|a| CliError::from(a.error)), outcome);
    let outcomes = save_records(out, vec![result])?;
    let mut single = spec;
    single.repeats = 1;
    let report = MetricsReport::new(single, outcomes);
    if let Some(dir) = out {
        save_report(dir, &report)?;
    }
    Ok(report)
}

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::ingestion(format!("cannot read {}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub format: String,
    pub version: u32,
    pub source: PathBuf,
    pub model: String,
    pub dataset: DatasetRef,
    /// Present when the test set is the stored split of a run record.
    pub split: Option<SplitSpec>,
    pub samples: usize,
    pub seed: u64,
    pub n_test: usize,
    pub metrics: TestMetrics,
}

impl EvaluationReport {
    pub fn render(&self) -> String {
        let mut t = Table::new(["dataset", "n test", "samples", "test LL", "RMSE"]);
        t.push(vec![
            self.dataset.name.clone(),
            self.n_test.to_string(),
            self.samples.to_string(),
            sig6(self.metrics.mean_ll),
            sig6(self.metrics.rmse),
        ]);
        format!("{}  {}\n\n{}", self.source.display(), self.model, t.render())
    }
}

fn describe(model: &DgpModel) -> String {
    let first = &model.layers[0];
    let sizes = match first {
        dgp_core::layer::LayerState::Coupled(c) => format!("M={}", c.inducing.nrows()),
        dgp_core::layer::LayerState::Decoupled(d) => {
            format!("Ma={} Mb={}", d.inducing_mean.nrows(), d.inducing_var.nrows())
        }
    };
    format!("{} {} depth={}", model.kind(), sizes, model.depth())
}

/// Recompute test metrics for a saved run record, checkpoint or model document.
///
/// A run record is scored on its own test split unless `dataset` is given.
/// A supplied dataset is used whole as the test set; bare checkpoints and
/// model documents need one.
pub fn evaluate(path: &Path, dataset: Option<DatasetRef>, samples: Option<usize>, seed: Option<u64>) -> CliResult<EvaluationReport> {
    let text = read(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::ingestion(format!("{}: not a JSON document: {e}", path.display())))?;
    let format = value.get("format").and_then(|f| f.as_str()).unwrap_or("").to_string();
    let (doc, stored) = match format.as_str() {
        RUN_FORMAT => {
            let r = RunRecord::from_json(&text)?;
            let split = r.experiment.split(r.repeat)?;
            let stored = (r.experiment.dataset.clone(), split, r.experiment.samples, r.seeds.eval);
            (r.checkpoint.model, Some(stored))
        }
        dgp_core::train::CHECKPOINT_FORMAT => (Checkpoint::from_json(&text)?.model, None),
        dgp_core::model::MODEL_FORMAT => (ModelDocument::from_json(&text)?, None),
        other => return Err(CliError::ingestion(format!("{}: unknown document format `{other}`", path.display()))),
    };
    if samples == Some(0) {
        return Err(CliError::config("samples must be at least 1"));
    }
    let (dataset, split_spec, test, default_samples, default_seed) = match (dataset, stored) {
        (Some(d), stored) => {
            let data = d.load()?;
            let (s, e) = stored.map(|s| (s.2, s.3)).unwrap_or((DEFAULT_SAMPLES, 0));
            (d, None, data, s, e)
        }
        (None, Some((d, sp, s, e))) => {
            let data = d.load()?;
            let (_, test) = split(&data, &sp);
            (d, Some(sp), test, s, e)
        }
        (None, None) => return Err(CliError::config("--dataset is required to evaluate a bare checkpoint or model")),
    };
    if test.num_features() != doc.model.input_dim() {
        return Err(CliError::config(format!(
            "dataset has {} features but the model expects {}",
            test.num_features(),
            doc.model.input_dim()
        )));
    }
    let samples = samples.unwrap_or(default_samples);
    let seed = seed.unwrap_or(default_seed);
    let metrics = doc.model.evaluate(&test.x, &test.y, samples, seed, doc.normalizer.as_ref())?;
    Ok(EvaluationReport {
        format: EVALUATION_FORMAT.into(),
        version: REPORT_VERSION,
        source: path.to_path_buf(),
        model: describe(&doc.model),
        dataset,
        split: split_spec,
        samples,
        seed,
        n_test: test.len(),
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.std.unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Summary::of(&[7.0]).unwrap().std, None);
        assert!(Summary::of(&[]).is_none());
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    fn outcome(repeat: usize, ll: f64, rmse: f64, failed: bool) -> RepeatOutcome {
        RepeatOutcome {
            repeat,
            seeds: RepeatSeeds {
                split: 0,
                init: 0,
                train: 0,
                eval: 0,
            },
            n_train: 8,
            n_test: 2,
            epochs_completed: 1,
            final_elbo: Some(-1.0),
            runtime_secs: repeat as f64,
            metrics: (!failed).then_some(TestMetrics { mean_ll: ll, rmse }),
            failure: failed.then(|| Failure {
                kind: FailureKind::Numerical,
                message: "boom".into(),
            }),
            record: None,
        }
    }

    #[test]
    fn aggregate_skips_failures() {
        let a = Aggregate::from_outcomes(&[outcome(0, 1.0, 0.1, false), outcome(1, 9.0, 9.0, true), outcome(2, 3.0, 0.3, false)]);
        assert_eq!((a.successes, a.failures), (2, 1));
        assert_eq!(a.mean_ll.unwrap().mean, 2.0);
        assert!((a.rmse.unwrap().mean - 0.2).abs() < 1e-15);
        assert_eq!(a.median_runtime_secs, Some(1.0));
    }
}
