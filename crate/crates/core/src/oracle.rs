//! Brute-force references for testing: finite differences, dense Gaussian
//! KL, the exact GP marginal likelihood and the predictive equations with
//! explicit inverses. Nothing here uses the factorization or kernel code of
//! the modules it checks.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DgpError, Result};
use crate::kernel::KernelParams;
use crate::layer::{CoupledLayerState, DecoupledLayerState, MeanVariant, VarVariant};
use crate::model::DgpModel;
use crate::objective::elbo;
use crate::params::{BlockId, ParamFilter};
use crate::rng::{rng_from, standard_normal_matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiniteDiffSpec {
    /// Step is `h0 * (1 + |theta_i|)`.
    pub h0: f64,
}

impl Default for FiniteDiffSpec {
    fn default() -> Self {
        FiniteDiffSpec { h0: 1e-4 }
    }
}

/// Central-difference gradient of `f` at `theta`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], spec: &FiniteDiffSpec) -> Result<Vec<f64>> {
    if !(spec.h0 > 0.0) {
        return Err(DgpError::Oracle("finite-difference step must be positive".into()));
    }
    let mut t = theta.to_vec();
    let mut g = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let h = spec.h0 * (1.0 + theta[i].abs());
        t[i] = theta[i] + h;
        let fp = f(&t);
        t[i] = theta[i] - h;
        let fm = f(&t);
        t[i] = theta[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(DgpError::Oracle(format!("objective not finite around coordinate {i}")));
        }
        g.push((fp - fm) / (2.0 * h));
    }
    Ok(g)
}

fn spd_logdet(s: &DMatrix<f64>, what: &str) -> Result<f64> {
    let c = s
        .clone()
        .cholesky()
        .ok_or_else(|| DgpError::Oracle(format!("{what} is not positive definite")))?;
    Ok(2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

fn inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .try_inverse()
        .ok_or_else(|| DgpError::Oracle(format!("{what} is singular")))
}

/// `KL(N(m0, S0) || N(m1, S1))`.
pub fn dense_gaussian_kl(m0: &DVector<f64>, s0: &DMatrix<f64>, m1: &DVector<f64>, s1: &DMatrix<f64>) -> Result<f64> {
    let k = m0.len() as f64;
    let s1_inv = inverse(s1, "S1")?;
    let d = m1 - m0;
    let quad = (d.transpose() * &s1_inv * &d)[(0, 0)];
    let tr = (&s1_inv * s0).trace();
    Ok(0.5 * (tr + quad - k + spd_logdet(s1, "S1")? - spd_logdet(s0, "S0")?))
}

/// Kernel by direct summation over coordinates.
pub fn naive_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, params: &KernelParams) -> DMatrix<f64> {
    let ls = params.lengthscales();
    let s2 = params.variance();
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let mut d2 = 0.0;
        for (k, l) in ls.iter().enumerate() {
            let t = (a[(i, k)] - b[(j, k)]) / l;
            d2 += t * t;
        }
        s2 * (-0.5 * d2).exp()
    })
}

/// `log N(y | 0, K + noise_var I)`, summed over the columns of `y`.
pub fn exact_gp_log_marginal(x: &DMatrix<f64>, y: &DMatrix<f64>, params: &KernelParams, noise_var: f64) -> Result<f64> {
    let n = x.nrows();
    let c = naive_kernel(x, x, params) + DMatrix::identity(n, n) * noise_var;
    let logdet = spd_logdet(&c, "K + noise I")?;
    let chol = c.cholesky().expect("checked above");
    let mut total = 0.0;
    for col in y.column_iter() {
        let alpha = chol.solve(&col.into_owned());
        total += -0.5 * col.dot(&alpha) - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    }
    Ok(total)
}

/// `(mean, var)` of a coupled layer, written with explicit inverses.
pub fn dense_predictive_coupled(x: &DMatrix<f64>, layer: &CoupledLayerState) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let kzz = naive_kernel(&layer.inducing, &layer.inducing, &layer.kernel);
    let kxz = naive_kernel(x, &layer.inducing, &layer.kernel);
    let kinv = inverse(&kzz, "K_ZZ")?;
    let l = layer.covariance_factor();
    let s = &l * l.transpose();
    let mean = &kxz * &kinv * &layer.mean;
    let cov = naive_kernel(x, x, &layer.kernel) - &kxz * &kinv * (&kzz - s) * &kinv * kxz.transpose();
    Ok((mean, cov.diagonal()))
}

/// `(mean, var)` of a decoupled layer, written with explicit inverses.
pub fn dense_predictive_decoupled(
    x: &DMatrix<f64>,
    layer: &DecoupledLayerState,
    mv: MeanVariant,
    vv: VarVariant,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let kp = &layer.kernel;
    let kaa = naive_kernel(&layer.inducing_mean, &layer.inducing_mean, kp);
    let kxa = naive_kernel(x, &layer.inducing_mean, kp);
    let mean = match mv {
        MeanVariant::Cb => &kxa * &layer.mean_param,
        MeanVariant::Gp => &kxa * inverse(&kaa, "K_aa")? * &layer.mean_param,
        MeanVariant::GpCent => {
            let l = kaa
                .clone()
                .cholesky()
                .ok_or_else(|| DgpError::Oracle("K_aa is not positive definite".into()))?
                .l();
            &kxa * inverse(&l.transpose(), "L^T")? * &layer.mean_param
        }
    };
    let kbb = naive_kernel(&layer.inducing_var, &layer.inducing_var, kp);
    let kxb = naive_kernel(x, &layer.inducing_var, kp);
    let lb = layer.variance_factor();
    let fac = &lb * lb.transpose();
    let middle = match vv {
        VarVariant::Gp => inverse(&(inverse(&fac, "B")? + &kbb), "B^-1 + K_bb")?,
        VarVariant::Cb => {
            let kinv = inverse(&kbb, "K_bb")?;
            &kinv * (&kbb - fac) * &kinv
        }
    };
    let cov = naive_kernel(x, x, kp) - &kxb * middle * kxb.transpose();
    Ok((mean, cov.diagonal()))
}

/// Disagreement between analytic and finite-difference gradients in one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub block: String,
    pub coordinates: usize,
    /// `||g - fd|| / max(||g||, ||fd||)` in the Euclidean norm over the block.
    pub rel_error: f64,
    /// Worst single-coordinate `|g_i - fd_i|`.
    pub max_abs_error: f64,
    /// `||g||`.
    pub gradient_norm: f64,
}

/// Norm-wise relative error of an analytic gradient block against its
/// finite-difference counterpart, plus the worst coordinate-wise absolute
/// error and the analytic norm. Two zero blocks agree exactly.
///
/// Coordinates whose derivative is tiny next to the objective are swamped
/// by roundoff in the differences, so they are judged by the block norm
/// rather than one by one.
pub fn block_relative_error(analytic: &[f64], fd: &[f64]) -> (f64, f64, f64) {
    let norm = |v: &[f64]| v.iter().map(|e| e * e).sum::<f64>().sqrt();
    let (ng, nf) = (norm(analytic), norm(fd));
    let diff: Vec<f64> = analytic.iter().zip(fd).map(|(g, f)| g - f).collect();
    let worst_abs = diff.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let denom = ng.max(nf);
    let rel = if denom == 0.0 { 0.0 } else { norm(&diff) / denom };
    (rel, worst_abs, ng)
}

/// Compare ELBO gradients against central differences, block by block, at a fixed sample path.
pub fn gradcheck(
    model: &DgpModel,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    full_size: usize,
    seed: u64,
    filter: &ParamFilter,
    spec: &FiniteDiffSpec,
) -> Result<Vec<BlockCheck>> {
    let (_, grads) = crate::train::elbo_gradients(model, x, y, full_size, seed, filter)?;
    let mut out = Vec::with_capacity(grads.len());
    for (id, g) in grads {
        let theta = model.get_block(&id)?;
        let fd = block_fd(model, &id, theta.as_slice(), x, y, full_size, seed, spec)?;
        let (rel, abs, norm) = block_relative_error(g.as_slice(), &fd);
        out.push(BlockCheck {
            block: id.to_string(),
            coordinates: fd.len(),
            rel_error: rel,
            max_abs_error: abs,
            gradient_norm: norm,
        });
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn block_fd(
    model: &DgpModel,
    id: &BlockId,
    theta: &[f64],
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    full_size: usize,
    seed: u64,
    spec: &FiniteDiffSpec,
) -> Result<Vec<f64>> {
    let shape = model.get_block(id)?.shape();
    let mut probe = model.clone();
    let mut failure = None;
    let g = finite_diff_grad(
        |t| {
            let v = DMatrix::from_column_slice(shape.0, shape.1, t);
            probe.set_block(id, &v).expect("shape preserved");
            match elbo(&probe, x, y, full_size, seed) {
                Ok(e) => e.total,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        theta,
        spec,
    );
    if let Some(e) = failure {
        return Err(DgpError::Oracle(format!("{id}: {e}")));
    }
    g.map_err(|e| DgpError::Oracle(format!("{id}: {e}")))
}

/// Add `scale * N(0, 1)` to every block selected by `filter`.
///
/// At initialization the model sits at the prior, where the gradients of
/// several blocks (output-layer inducing inputs, for one) vanish by symmetry
/// and a relative error means nothing. Checking at a perturbed point avoids that.
pub fn perturb_parameters(model: &mut DgpModel, filter: &ParamFilter, seed: u64, scale: f64) -> Result<()> {
    for (i, id) in model.block_ids(filter).into_iter().enumerate() {
        let v = model.get_block(&id)?;
        let noise = standard_normal_matrix(&mut rng_from(seed, &[PERTURB_STREAM, i as u64]), v.nrows(), v.ncols());
        model.set_block(&id, &(v + noise * scale))?;
    }
    model.validate()
}

const PERTURB_STREAM: u64 = 0x9E27;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{kernel_matrix, robust_cholesky, JitterPolicy};
    use crate::layer::{coupled_predict, decoupled_predict};
    use crate::objective::kl_coupled;

    #[test]
    fn block_error_is_normwise() {
        assert_eq!(block_relative_error(&[0.0, 0.0], &[0.0, 0.0]), (0.0, 0.0, 0.0));
        let (rel, abs, norm) = block_relative_error(&[3.0, 4.0], &[3.0, 4.0 + 1e-6]);
        assert!((rel - 1e-6 / 5.0).abs() < 1e-12);
        assert!((abs - 1e-6).abs() < 1e-12);
        assert_eq!(norm, 5.0);
        // a near-zero coordinate does not dominate
        let (rel, _, _) = block_relative_error(&[1.0, 1e-12], &[1.0, 2e-12]);
        assert!(rel < 1e-11);
    }

    #[test]
    fn perturbation_is_seeded() {
        let ds = crate::data::make_synthetic(crate::data::SyntheticKind::Linear, 12, 0.1, 0).unwrap();
        let model = DgpModel::init(&crate::model::ModelConfig::coupled(4, 1, 2), &ds.x, 1, 0).unwrap();
        let (mut a, mut b) = (model.clone(), model.clone());
        perturb_parameters(&mut a, &ParamFilter::ALL, 3, 0.1).unwrap();
        perturb_parameters(&mut b, &ParamFilter::ALL, 3, 0.1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, model);
    }

    #[test]
    fn finite_difference_basics() {
        let g = finite_diff_grad(|t| t[0] * t[0], &[3.0], &FiniteDiffSpec::default()).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.0], &FiniteDiffSpec::default()).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        let e = finite_diff_grad(|t| if t[1] > 0.0 { f64::NAN } else { 0.0 }, &[0.0, 0.0], &FiniteDiffSpec::default());
        assert!(matches!(e, Err(DgpError::Oracle(m)) if m.contains("coordinate 1")));
    }

    #[test]
    fn kl_gradient_in_mean_is_kinv_m() {
        let mut rng = rng_from(1, &[]);
        let z = standard_normal_matrix(&mut rng, 4, 2);
        let kp = KernelParams::new(&[1.1, 0.9], 1.5).unwrap();
        let k = kernel_matrix(&z, &z, &kp).unwrap();
        let l = robust_cholesky(&k, &JitterPolicy::default()).unwrap().l;
        let m = standard_normal_matrix(&mut rng, 4, 1);
        let kl = |t: &[f64]| {
            let s = CoupledLayerState::new(z.clone(), DMatrix::from_column_slice(4, 1, t), &l, kp.clone()).unwrap();
            kl_coupled(&s).unwrap()
        };
        let fd = finite_diff_grad(kl, m.as_slice(), &FiniteDiffSpec::default()).unwrap();
        let exact = naive_kernel(&z, &z, &kp).try_inverse().unwrap() * &m;
        for i in 0..4 {
            assert!((fd[i] - exact[i]).abs() < 1e-6 * (1.0 + exact[i].abs()), "{} vs {}", fd[i], exact[i]);
        }
    }

    #[test]
    fn gaussian_kl_scalars() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let z = DVector::from_element(1, 0.0);
        assert_eq!(dense_gaussian_kl(&z, &one, &z, &one).unwrap(), 0.0);
        let kl = dense_gaussian_kl(&DVector::from_element(1, 1.0), &one, &z, &one).unwrap();
        assert!((kl - 0.5).abs() < 1e-14);
        let kl = dense_gaussian_kl(&z, &DMatrix::from_element(1, 1, 2.0), &z, &one).unwrap();
        assert!((kl - 0.5 * (2.0 - 1.0 - 2f64.ln())).abs() < 1e-14);
        assert!((kl - 0.15343).abs() < 1e-5);
        assert!(dense_gaussian_kl(&z, &DMatrix::from_element(1, 1, -1.0), &z, &one).is_err());
    }

    #[test]
    fn exact_marginal_cases() {
        let kp = KernelParams::new(&[1.0], 1.0).unwrap();
        let x = DMatrix::from_element(1, 1, 0.0);
        let v = exact_gp_log_marginal(&x, &DMatrix::zeros(1, 1), &kp, 1.0).unwrap();
        assert!((v - (-0.5 * (4.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
        assert!((v + 1.26551).abs() < 1e-5);

        let mut rng = rng_from(2, &[]);
        let x = standard_normal_matrix(&mut rng, 8, 2);
        let y = standard_normal_matrix(&mut rng, 8, 1);
        let kp = KernelParams::new(&[0.7, 1.3], 0.9).unwrap();
        let noise = 0.3;
        let c = naive_kernel(&x, &x, &kp) + DMatrix::identity(8, 8) * noise;
        let cinv = c.clone().try_inverse().unwrap();
        let quad = (y.transpose() * &cinv * &y)[(0, 0)];
        let naive = -0.5 * quad - 0.5 * c.determinant().ln() - 4.0 * (2.0 * std::f64::consts::PI).ln();
        let base = exact_gp_log_marginal(&x, &y, &kp, noise).unwrap();
        assert!((base - naive).abs() < 1e-9);
        let scaled = exact_gp_log_marginal(&x, &(&y * 3.0), &kp, noise).unwrap();
        assert!((scaled - base - (-(9.0 - 1.0) * quad / 2.0)).abs() < 1e-9);
    }

    fn random_coupled(seed: u64, m: usize, d: usize, d_out: usize) -> CoupledLayerState {
        let mut rng = rng_from(seed, &[]);
        let z = standard_normal_matrix(&mut rng, m, d);
        let kp = KernelParams::new(&vec![1.2; d], 1.4).unwrap();
        let g = standard_normal_matrix(&mut rng, m, m);
        let s = &g * g.transpose() * 0.1 + DMatrix::identity(m, m) * 0.05;
        let ls = s.cholesky().unwrap().l();
        CoupledLayerState::new(z, standard_normal_matrix(&mut rng, m, d_out), &ls, kp).unwrap()
    }

    #[test]
    fn coupled_sweep() {
        for seed in 0..20 {
            let layer = random_coupled(seed, 6, 2, 2);
            let x = standard_normal_matrix(&mut rng_from(seed, &[1]), 10, 2);
            let (m, v) = dense_predictive_coupled(&x, &layer).unwrap();
            let p = coupled_predict(&x, &layer).unwrap();
            assert!((&p.mean - &m).abs().max() <= 1e-9 * m.abs().max().max(1.0));
            assert!((&p.var - &v).abs().max() <= 1e-9 * v.abs().max().max(1.0));
        }
    }

    #[test]
    fn decoupled_sweep() {
        for seed in 0..20 {
            let mut rng = rng_from(seed, &[2]);
            let kp = KernelParams::new(&[0.9, 1.6], 1.1).unwrap();
            let za = standard_normal_matrix(&mut rng, 8, 2);
            let zb = standard_normal_matrix(&mut rng, 4, 2);
            let g = standard_normal_matrix(&mut rng, 4, 4);
            let lb = (&g * g.transpose() * 0.2 + DMatrix::identity(4, 4) * 0.1).cholesky().unwrap().l();
            let layer = DecoupledLayerState::new(za, zb, standard_normal_matrix(&mut rng, 8, 2), &lb, kp).unwrap();
            let x = standard_normal_matrix(&mut rng, 12, 2);
            for mv in [MeanVariant::Cb, MeanVariant::Gp, MeanVariant::GpCent] {
                for vv in [VarVariant::Gp, VarVariant::Cb] {
                    let (m, v) = dense_predictive_decoupled(&x, &layer, mv, vv).unwrap();
                    let p = decoupled_predict(&x, &layer, mv, vv).unwrap();
                    assert!((&p.mean - &m).abs().max() <= 1e-9 * m.abs().max().max(1.0), "{mv} {vv}");
                    let floor = 1e-8 * 1.1;
                    let v = v.map(|e| e.max(floor));
                    assert!((&p.var - &v).abs().max() <= 1e-9 * v.abs().max().max(1.0), "{mv} {vv}");
                }
            }
        }
    }

    #[test]
    fn collapse_at_inputs() {
        let layer = random_coupled(5, 5, 2, 1);
        let (m, v) = dense_predictive_coupled(&layer.inducing, &layer).unwrap();
        let l = layer.covariance_factor();
        let s = &l * l.transpose();
        assert!((m - &layer.mean).abs().max() < 1e-8);
        assert!((v - s.diagonal()).abs().max() < 1e-8);
    }
}
