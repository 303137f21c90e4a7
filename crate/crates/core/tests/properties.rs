//! Randomized invariants of the layer algebra, objective, data handling and
//! serialization.

use dgp_core::data::{make_synthetic, split_indices, SyntheticKind};
use dgp_core::kernel::{kernel_matrix, robust_cholesky, JitterPolicy};
use dgp_core::layer::{coupled_predict, decoupled_predict, CoupledLayerState, DecoupledLayerState, LayerState, StaticMeanMap};
use dgp_core::model::{mixture_log_likelihood, PredictiveSamples};
use dgp_core::objective::{elbo, kl_coupled, kl_decoupled};
use dgp_core::oracle::{exact_gp_log_marginal, perturb_parameters};
use dgp_core::rng::{rng_from, standard_normal_matrix, Rng};
use dgp_core::{
    Dataset, DgpModel, KernelParams, MeanVariant, ModelConfig, ModelDocument, Normalizer, ParamFilter, SplitSpec, VarVariant,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

const MEANS: [MeanVariant; 3] = [MeanVariant::Cb, MeanVariant::Gp, MeanVariant::GpCent];

fn lower_factor(rng: &mut Rng, m: usize) -> DMatrix<f64> {
    let mut l = standard_normal_matrix(rng, m, m) * 0.3;
    for i in 0..m {
        l[(i, i)] = 0.2 + l[(i, i)].abs();
        for j in i + 1..m {
            l[(i, j)] = 0.0;
        }
    }
    l
}

fn condition(k: &DMatrix<f64>) -> f64 {
    let ev = k.clone().symmetric_eigenvalues();
    if ev.min() <= 0.0 {
        f64::INFINITY
    } else {
        ev.max() / ev.min()
    }
}

fn max_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max() / b.abs().max().max(1e-300)
}

fn small_model(kind: u8, depth: usize, seed: u64, x: &DMatrix<f64>) -> DgpModel {
    let cfg = match kind % 3 {
        0 => ModelConfig::coupled(6, depth, 3),
        1 => ModelConfig::decoupled(6, 3, depth, 3, MeanVariant::GpCent, VarVariant::Gp),
        _ => ModelConfig::decoupled(5, 4, depth, 2, MeanVariant::Cb, VarVariant::Cb),
    };
    DgpModel::init(&cfg, x, 1, seed).unwrap()
}

fn inputs(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    standard_normal_matrix(&mut rng_from(seed, &[0x1]), n, d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kl_is_nonnegative_and_parameterizations_agree(seed in any::<u64>(), m in 1usize..=8, d in 1usize..=3, d_out in 1usize..=2, ls in 0.4f64..1.5) {
        let mut rng = rng_from(seed, &[]);
        let z = standard_normal_matrix(&mut rng, m, d) * 1.5;
        let kp = KernelParams::new(&vec![ls; d], 1.3).unwrap();
        let k = kernel_matrix(&z, &z, &kp).unwrap();
        // The dual-coefficient reference a = K^-1 m loses about cond(K)^2 * eps
        // through cancellation in K_xz a.
        prop_assume!(condition(&k) < 1e5);
        let lb = lower_factor(&mut rng, m);
        let b = &lb * lb.transpose();
        let kinv = k.clone().try_inverse().unwrap();
        let s = (&kinv + &b).try_inverse().unwrap();
        let s = (&s + s.transpose()) * 0.5;
        let mean = standard_normal_matrix(&mut rng, m, d_out);
        let coupled = CoupledLayerState::new(z.clone(), mean.clone(), &s.clone().cholesky().unwrap().l(), kp.clone()).unwrap();
        let kl = kl_coupled(&coupled).unwrap();
        prop_assert!(kl >= -1e-8);
        let x = standard_normal_matrix(&mut rng, 7, d);
        let want = coupled_predict(&x, &coupled).unwrap();
        let lk = k.clone().cholesky().unwrap().l();
        for mv in MEANS {
            let param = match mv {
                MeanVariant::Gp => mean.clone(),
                MeanVariant::Cb => &kinv * &mean,
                MeanVariant::GpCent => lk.solve_lower_triangular(&mean).unwrap(),
            };
            let dec = DecoupledLayerState::new(z.clone(), z.clone(), param, &lb, kp.clone()).unwrap();
            let got = decoupled_predict(&x, &dec, mv, VarVariant::Gp).unwrap();
            prop_assert!(max_rel(&got.mean, &want.mean) < 1e-8);
            prop_assert!((&got.var - &want.var).abs().max() <= 1e-8 * want.var.abs().max());
            let kd = kl_decoupled(&dec, mv, VarVariant::Gp).unwrap();
            prop_assert!((kd - kl).abs() <= 1e-8 * kl.abs().max(1e-12), "{mv}: {kd} vs {kl}");
            prop_assert!(kl_decoupled(&dec, mv, VarVariant::Cb).unwrap() >= -1e-8);
        }
    }

    #[test]
    fn elbo_is_a_bound_with_z_equal_x(seed in any::<u64>(), n in 4usize..=16, ls in 0.05f64..0.3, noise in 0.01f64..0.5) {
        let ds = make_synthetic(SyntheticKind::Sinusoid, n, 0.1, seed).unwrap();
        let kp = KernelParams::new(&[ls], 1.0).unwrap();
        let mut model = DgpModel::init(&ModelConfig::coupled(n, 0, 1), &ds.x, 1, seed).unwrap();
        model.inducing_jitter = 0.0;
        model.mean_maps[0] = StaticMeanMap::zero(1, 1);
        model.log_noise_var = noise.ln();
        let LayerState::Coupled(layer) = &model.layers[0] else { unreachable!() };
        let z = layer.inducing.clone();
        let k = kernel_matrix(&z, &z, &kp).unwrap();
        let prior = robust_cholesky(&k, &JitterPolicy::default()).unwrap();
        prop_assume!(prior.jitter == 0.0);
        let mut rng = rng_from(seed, &[0x2]);
        let mean = standard_normal_matrix(&mut rng, n, 1);
        let factor = &prior.l * 0.5 + lower_factor(&mut rng, n) * 0.1;
        model.layers[0] = LayerState::Coupled(CoupledLayerState::new(z, mean, &factor, kp.clone()).unwrap());
        let bound = exact_gp_log_marginal(&ds.x, &ds.y, &kp, noise).unwrap();
        let e = elbo(&model, &ds.x, &ds.y, n, 0).unwrap().total;
        prop_assert!(e <= bound + 1e-9 * bound.abs(), "{e} > {bound}");
    }

    #[test]
    fn elbo_is_deterministic(seed in any::<u64>(), kind in 0u8..3, depth in 0usize..=2, batch_seed in any::<u64>()) {
        let x = inputs(12, 2, seed);
        let y = x.column(0).map(f64::sin).into_owned();
        let y = DMatrix::from_column_slice(12, 1, y.as_slice());
        let mut model = small_model(kind, depth, seed, &x);
        perturb_parameters(&mut model, &ParamFilter::ALL, seed, 0.1).unwrap();
        let a = elbo(&model, &x, &y, 40, batch_seed).unwrap();
        let b = elbo(&model, &x, &y, 40, batch_seed).unwrap();
        prop_assert_eq!(a.total.to_bits(), b.total.to_bits());
        prop_assert_eq!(a.kl_per_layer, b.kl_per_layer);
    }

    #[test]
    fn normalizer_round_trip(seed in any::<u64>(), n in 2usize..40, d in 1usize..5, scale in 1e-3f64..1e3, offset in -1e3f64..1e3) {
        let mut rng = rng_from(seed, &[]);
        let x = standard_normal_matrix(&mut rng, n, d) * scale + DMatrix::from_element(n, d, offset);
        let y = standard_normal_matrix(&mut rng, n, 1) * scale;
        let ds = Dataset::new("p", x, y).unwrap();
        let norm = Normalizer::fit(&ds);
        let back = norm.x.invert(&norm.x.apply(&ds.x).unwrap()).unwrap();
        for (a, b) in back.iter().zip(ds.x.iter()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
        let back = norm.y.invert(&norm.y.apply(&ds.y).unwrap()).unwrap();
        for (a, b) in back.iter().zip(ds.y.iter()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn split_is_a_partition(n in 2usize..300, frac in 0.01f64..0.99, repeat in 0u64..10, seed in any::<u64>()) {
        let spec = SplitSpec::new(frac, repeat, seed).unwrap();
        let (train, test) = split_indices(n, &spec);
        prop_assert_eq!(test.len(), (frac * n as f64).floor() as usize);
        let mut all: Vec<usize> = train.iter().chain(test.iter()).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split_indices(n, &spec), (train, test));
    }

    #[test]
    fn forward_sample_shapes(seed in any::<u64>(), kind in 0u8..3, depth in 0usize..=4, n in 1usize..20, samples in 1usize..6) {
        let x = inputs(12, 3, seed);
        let model = small_model(kind, depth, seed, &x);
        let test = inputs(n, 3, seed ^ 1);
        let pred = model.forward_sample(&test, seed, samples).unwrap();
        prop_assert_eq!(pred.num_samples(), samples);
        for (m, v) in pred.means.iter().zip(&pred.vars) {
            prop_assert_eq!(m.shape(), (n, 1));
            prop_assert_eq!(v.len(), n);
            prop_assert!(m.iter().all(|e| e.is_finite()));
            prop_assert!(v.iter().all(|e| e.is_finite() && *e > 0.0));
        }
        prop_assert_eq!(model.forward_sample(&test, seed, samples).unwrap(), pred);
    }

    #[test]
    fn document_round_trip_is_exact(seed in any::<u64>(), kind in 0u8..3, depth in 0usize..=3) {
        let x = inputs(12, 2, seed);
        let mut model = small_model(kind, depth, seed, &x);
        perturb_parameters(&mut model, &ParamFilter::ALL, seed, 0.3).unwrap();
        let ds = Dataset::new("p", x.clone(), DMatrix::from_element(12, 1, 0.5) + inputs(12, 1, seed ^ 7)).unwrap();
        let doc = ModelDocument::new(model, Some(Normalizer::fit(&ds)));
        let text = doc.to_json().unwrap();
        let back = ModelDocument::from_json(&text).unwrap();
        prop_assert_eq!(&back, &doc);
        prop_assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn mixture_of_identical_paths_is_one_gaussian(seed in any::<u64>(), n in 1usize..15, s in 1usize..8, noise in 1e-3f64..1.0) {
        let mut rng = rng_from(seed, &[]);
        let mean = standard_normal_matrix(&mut rng, n, 1);
        let var = DVector::from_iterator(n, standard_normal_matrix(&mut rng, n, 1).iter().map(|v| v.abs() + 1e-3));
        let y = standard_normal_matrix(&mut rng, n, 1);
        let pred = PredictiveSamples { means: vec![mean.clone(); s], vars: vec![var.clone(); s] };
        let got = mixture_log_likelihood(&pred, &y, noise).unwrap();
        let want: f64 = (0..n)
            .map(|i| {
                let v = var[i] + noise;
                -0.5 * (2.0 * std::f64::consts::PI * v).ln() - (y[(i, 0)] - mean[(i, 0)]).powi(2) / (2.0 * v)
            })
            .sum::<f64>()
            / n as f64;
        prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
    }
}
