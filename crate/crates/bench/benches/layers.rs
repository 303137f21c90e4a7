use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dgp_core::kernel::{kernel_matrix, robust_cholesky, JitterPolicy};
use dgp_core::rng::{rng_from, standard_normal_matrix};
use dgp_core::train::elbo_gradients;
use dgp_core::{DgpModel, KernelParams, MeanVariant, ModelConfig, ParamFilter, VarVariant};
use nalgebra::DMatrix;

fn data(n: usize, d: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let x = standard_normal_matrix(&mut rng_from(0, &[1]), n, d);
    let y = DMatrix::from_fn(n, 1, |i, _| x.row(i).sum().sin());
    (x, y)
}

fn kernels(c: &mut Criterion) {
    let mut g = c.benchmark_group("kernel_matrix");
    let (x, _) = data(1000, 8);
    let kp = KernelParams::unit(8);
    for m in [100, 500] {
        let z = x.rows(0, m).into_owned();
        g.bench_with_input(BenchmarkId::from_parameter(m), &z, |b, z| b.iter(|| kernel_matrix(&x, z, &kp).unwrap()));
    }
    g.finish();

    let mut g = c.benchmark_group("cholesky");
    for m in [100, 200, 500] {
        let z = x.rows(0, m).into_owned();
        let k = kernel_matrix(&z, &z, &kp).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(m), &k, |b, k| {
            b.iter(|| robust_cholesky(k, &JitterPolicy::default()).unwrap())
        });
    }
    g.finish();
}

fn gradients(c: &mut Criterion) {
    let mut g = c.benchmark_group("elbo_gradients");
    g.sample_size(10);
    let (x, y) = data(500, 8);
    let configs = [
        ("coupled-50", ModelConfig::coupled(50, 1, 5)),
        ("coupled-100", ModelConfig::coupled(100, 1, 5)),
        ("decoupled-200-25", ModelConfig::decoupled(200, 25, 1, 5, MeanVariant::GpCent, VarVariant::Gp)),
        ("decoupled-200-50", ModelConfig::decoupled(200, 50, 1, 5, MeanVariant::GpCent, VarVariant::Gp)),
        ("decoupled-cb-200-50", ModelConfig::decoupled(200, 50, 1, 5, MeanVariant::Cb, VarVariant::Gp)),
    ];
    for (name, cfg) in configs {
        let model = DgpModel::init(&cfg, &x, 1, 0).unwrap();
        g.bench_function(name, |b| b.iter(|| elbo_gradients(&model, &x, &y, 500, 0, &ParamFilter::ALL).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, kernels, gradients);
criterion_main!(benches);
