//! Per-step training cost over a grid of architectures.

use std::time::Instant;

use dgp_core::rng::{derive_seed, rng_from, standard_normal_matrix};
use dgp_core::train::{adam_step, elbo_gradients};
use dgp_core::{AdamState, DgpModel, ModelConfig, ModelKind, ParamFilter, TrainConfig, Variants};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::format::{sig6, Table};
use crate::run::median;

pub const BENCHMARK_FORMAT: &str = "dgp-benchmark";
pub const BENCHMARK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    /// Rows of the synthetic dataset.
    pub n: usize,
    /// Input dimension of the synthetic dataset.
    pub d: usize,
    pub seed: u64,
    pub warmup: usize,
    pub iterations: usize,
    pub configs: Vec<ModelConfig>,
    pub batches: Vec<usize>,
}

/// Cartesian product of the size lists; coupled models take `ms`,
/// decoupled ones `mas x mbs`.
#[allow(clippy::too_many_arguments)]
pub fn grid(
    kinds: &[ModelKind],
    ms: &[usize],
    mas: &[usize],
    mbs: &[usize],
    depths: &[usize],
    widths: &[usize],
    variants: Variants,
) -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for &kind in kinds {
        for &depth in depths {
            for &width in widths {
                match kind {
                    ModelKind::Coupled => out.extend(ms.iter().map(|&m| ModelConfig::coupled(m, depth, width))),
                    ModelKind::Decoupled => {
                        for &ma in mas {
                            out.extend(
                                mbs.iter()
                                    .map(|&mb| ModelConfig::decoupled(ma, mb, depth, width, variants.mean, variants.var)),
                            );
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: ModelConfig,
    pub batch: usize,
    pub median_step_secs: f64,
    pub min_step_secs: f64,
    pub max_step_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub format: String,
    pub version: u32,
    pub spec: BenchmarkSpec,
    pub rows: Vec<BenchRow>,
}

impl BenchmarkReport {
    pub fn table(&self) -> Table {
        let mut t = Table::new([
            "model", "M", "Ma", "Mb", "depth", "width", "batch", "median_step_s", "min_step_s", "max_step_s",
        ]);
        for r in &self.rows {
            let m = &r.model;
            let coupled = m.kind == ModelKind::Coupled;
            let size = |v: usize, show: bool| if show { v.to_string() } else { "-".into() };
            t.push(vec![
                m.kind.to_string(),
                size(m.m, coupled),
                size(m.m_a, !coupled),
                size(m.m_b, !coupled),
                m.depth.to_string(),
                m.width.to_string(),
                r.batch.to_string(),
                sig6(r.median_step_secs),
                sig6(r.min_step_secs),
                sig6(r.max_step_secs),
            ]);
        }
        t
    }

    pub fn render(&self) -> String {
        format!(
            "synthetic N={} D={}  {} timed steps after {} warmup\n\n{}",
            self.spec.n,
            self.spec.d,
            self.spec.iterations,
            self.spec.warmup,
            self.table().render()
        )
    }

    /// Plot-ready comma-separated rows at full precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,m,m_a,m_b,depth,width,batch,median_step_s,min_step_s,max_step_s\n");
        for r in &self.rows {
            let m = &r.model;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{:e},{:e},{:e}\n",
                m.kind, m.m, m.m_a, m.m_b, m.depth, m.width, r.batch, r.median_step_secs, r.min_step_secs, r.max_step_secs
            ));
        }
        out
    }
}

/// Inputs `N(0, I)`, target `sin` of a random projection plus noise.
pub fn synthetic_data(n: usize, d: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut rng = rng_from(seed, &[]);
    let x = standard_normal_matrix(&mut rng, n, d);
    let w = standard_normal_matrix(&mut rng, d, 1) / (d as f64).sqrt();
    let e = standard_normal_matrix(&mut rng, n, 1);
    let y = (&x * w).map(f64::sin) + e * 0.1;
    (x, y)
}

/// Time full training steps (gradient plus Adam update) on a fixed minibatch.
pub fn time_steps(model: &DgpModel, x: &DMatrix<f64>, y: &DMatrix<f64>, full: usize, warmup: usize, iters: usize, seed: u64) -> CliResult<Vec<f64>> {
    let cfg = TrainConfig::default();
    let mut model = model.clone();
    let mut adam = AdamState::for_model(&model, &ParamFilter::ALL)?;
    let mut times = Vec::with_capacity(iters);
    for i in 0..warmup + iters {
        let start = Instant::now();
        let (_, grads) = elbo_gradients(&model, x, y, full, derive_seed(seed, &[i as u64]), &ParamFilter::ALL)?;
        let mut params: Vec<DMatrix<f64>> = grads.iter().map(|(id, _)| model.get_block(id)).collect::<Result<_, _>>()?;
        adam_step(&mut params, &grads, &mut adam, &cfg)?;
        for ((id, _), p) in grads.iter().zip(&params) {
            model.set_block(id, p)?;
        }
        let t = start.elapsed().as_secs_f64();
        if i >= warmup {
            times.push(t);
        }
    }
    Ok(times)
}

/// Configurations run one after another on the calling thread.
pub fn benchmark(spec: &BenchmarkSpec) -> CliResult<BenchmarkReport> {
    if spec.configs.is_empty() || spec.batches.is_empty() {
        return Err(CliError::config("benchmark grid is empty"));
    }
    if spec.iterations == 0 || spec.n < 2 || spec.d == 0 {
        return Err(CliError::config("benchmark needs iterations >= 1, N >= 2 and D >= 1"));
    }
    let (x, y) = synthetic_data(spec.n, spec.d, spec.seed);
    let mut rows = Vec::new();
    for cfg in &spec.configs {
        cfg.validate()?;
        let model = DgpModel::init(cfg, &x, 1, spec.seed)?;
        for &batch in &spec.batches {
            if batch == 0 {
                return Err(CliError::config("batch size must be positive"));
            }
            let b = batch.min(spec.n);
            let (xb, yb) = (x.rows(0, b).into_owned(), y.rows(0, b).into_owned());
            let times = time_steps(&model, &xb, &yb, spec.n, spec.warmup, spec.iterations, spec.seed)?;
            rows.push(BenchRow {
                model: cfg.clone(),
                batch: b,
                median_step_secs: median(&times).expect("iterations > 0"),
                min_step_secs: times.iter().copied().fold(f64::INFINITY, f64::min),
                max_step_secs: times.iter().copied().fold(0.0, f64::max),
            });
        }
    }
    Ok(BenchmarkReport {
        format: BENCHMARK_FORMAT.into(),
        version: BENCHMARK_VERSION,
        spec: spec.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use dgp_core::{MeanVariant, VarVariant};

    fn variants() -> Variants {
        Variants {
            mean: MeanVariant::GpCent,
            var: VarVariant::Gp,
        }
    }

    #[test]
    fn grid_product() {
        let g = grid(&[ModelKind::Coupled, ModelKind::Decoupled], &[5, 10], &[20], &[4, 8, 16], &[0, 1], &[10], variants());
        assert_eq!(g.len(), 2 * 2 + 3 * 2);
        assert_eq!(g.iter().filter(|c| c.kind == ModelKind::Coupled).count(), 4);
    }

    #[test]
    fn small_benchmark_runs() {
        let spec = BenchmarkSpec {
            n: 40,
            d: 3,
            seed: 1,
            warmup: 1,
            iterations: 3,
            configs: grid(&[ModelKind::Decoupled], &[], &[10], &[4], &[1], &[5], variants()),
            batches: vec![20, 100],
        };
        let r = benchmark(&spec).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[1].batch, 40);
        assert!(r.rows.iter().all(|row| row.min_step_secs <= row.median_step_secs && row.median_step_secs <= row.max_step_secs));
        assert_eq!(r.to_csv().lines().count(), 3);
    }
}
