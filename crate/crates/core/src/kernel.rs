//! RBF kernel with automatic relevance determination, plus the jittered
//! Cholesky and triangular solves the rest of the crate is built on.
//!
//! k(x, x') = s2 * exp(-0.5 * sum_j (x_j - x'_j)^2 / l_j^2)
//!
//! Hyperparameters are stored as logs so they can be optimized without
//! constraints.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dense;
use crate::error::{DgpError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub log_lengthscales: Vec<f64>,
    pub log_variance: f64,
}

impl KernelParams {
    pub fn new(lengthscales: &[f64], variance: f64) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(DgpError::config("kernel needs at least one lengthscale"));
        }
        if lengthscales.iter().any(|&l| !(l > 0.0) || !l.is_finite()) || !(variance > 0.0) || !variance.is_finite() {
            return Err(DgpError::config("kernel lengthscales and variance must be positive and finite"));
        }
        Ok(KernelParams {
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
            log_variance: variance.ln(),
        })
    }

    /// Unit lengthscales and unit variance, the starting point on normalized inputs.
    pub fn unit(dim: usize) -> Self {
        KernelParams {
            log_lengthscales: vec![0.0; dim],
            log_variance: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| l.exp()).collect()
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }

    fn check(&self, a: &DMatrix<f64>) -> Result<()> {
        if a.ncols() != self.dim() {
            return Err(DgpError::config(format!(
                "input has {} columns but the kernel has {} lengthscales",
                a.ncols(),
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Divide every column by its lengthscale.
pub(crate) fn scale_inputs(a: &DMatrix<f64>, lengthscales: &[f64]) -> DMatrix<f64> {
    let mut s = a.clone();
    for (j, mut col) in s.column_iter_mut().enumerate() {
        let inv = 1.0 / lengthscales[j];
        col.iter_mut().for_each(|v| *v *= inv);
    }
    s
}

fn row_sq_norms(a: &DMatrix<f64>) -> Vec<f64> {
    let mut out = vec![0.0; a.nrows()];
    for col in a.column_iter() {
        for (o, v) in out.iter_mut().zip(col.iter()) {
            *o += v * v;
        }
    }
    out
}

/// Kernel evaluation on already lengthscale-divided inputs.
pub(crate) fn rbf_scaled(as_: &DMatrix<f64>, bs: &DMatrix<f64>, variance: f64) -> DMatrix<f64> {
    let na = row_sq_norms(as_);
    let nb = row_sq_norms(bs);
    let mut k = dense::matmul(as_, false, bs, true);
    for (j, mut col) in k.column_iter_mut().enumerate() {
        for (i, v) in col.iter_mut().enumerate() {
            let d2 = (na[i] + nb[j] - 2.0 * *v).max(0.0);
            *v = variance * (-0.5 * d2).exp();
        }
    }
    k
}

/// Symmetric Gram matrix `k(A, A)`: exact diagonal, exactly mirrored off-diagonal.
pub(crate) fn rbf_scaled_sym(as_: &DMatrix<f64>, variance: f64) -> DMatrix<f64> {
    let mut k = rbf_scaled(as_, as_, variance);
    let n = k.nrows();
    for j in 0..n {
        k[(j, j)] = variance;
        for i in (j + 1)..n {
            k[(j, i)] = k[(i, j)];
        }
    }
    k
}

/// `K_AB`, entry `(i, j) = k(A_i, B_j)`.
///
/// When `a` and `b` are the same matrix the result is exactly symmetric with
/// diagonal equal to the signal variance.
pub fn kernel_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, params: &KernelParams) -> Result<DMatrix<f64>> {
    params.check(a)?;
    params.check(b)?;
    let ls = params.lengthscales();
    let as_ = scale_inputs(a, &ls);
    if std::ptr::eq(a, b) {
        return Ok(rbf_scaled_sym(&as_, params.variance()));
    }
    let bs = scale_inputs(b, &ls);
    Ok(rbf_scaled(&as_, &bs, params.variance()))
}

/// Diagonal of `K_AA`; constant for a stationary kernel.
pub fn kernel_diag(a: &DMatrix<f64>, params: &KernelParams) -> Result<Vec<f64>> {
    params.check(a)?;
    Ok(vec![params.variance(); a.nrows()])
}

/// Diagonal jitter schedule for factorizing nearly singular Gram matrices.
///
/// The schedule is `0, initial, initial * growth, ...` with `max_attempts`
/// jittered attempts after the unjittered one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterPolicy {
    pub initial_jitter: f64,
    pub growth_factor: f64,
    pub max_attempts: u32,
}

impl JitterPolicy {
    pub fn new(initial_jitter: f64, growth_factor: f64, max_attempts: u32) -> Result<Self> {
        if !(initial_jitter > 0.0) || !(growth_factor > 1.0) || max_attempts < 1 {
            return Err(DgpError::config(
                "jitter policy needs initial > 0, growth > 1 and at least one attempt",
            ));
        }
        Ok(JitterPolicy {
            initial_jitter,
            growth_factor,
            max_attempts,
        })
    }

    /// Default schedule scaled to the kernel magnitude: 1e-6 * s2, growth 10, 5 attempts.
    pub fn for_variance(signal_variance: f64) -> Self {
        JitterPolicy {
            initial_jitter: 1e-6 * signal_variance,
            growth_factor: 10.0,
            max_attempts: 5,
        }
    }

    pub fn schedule(&self) -> impl Iterator<Item = f64> + '_ {
        std::iter::once(0.0).chain((0..self.max_attempts).map(move |i| self.initial_jitter * self.growth_factor.powi(i as i32)))
    }
}

impl Default for JitterPolicy {
    fn default() -> Self {
        JitterPolicy::for_variance(1.0)
    }
}

/// A lower Cholesky factor together with the jitter that made it succeed.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    pub l: DMatrix<f64>,
    pub jitter: f64,
}

impl CholeskyFactor {
    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Factor `K + eps I` for the smallest `eps` in the policy schedule that succeeds.
pub fn robust_cholesky(k: &DMatrix<f64>, policy: &JitterPolicy) -> Result<CholeskyFactor> {
    if k.nrows() != k.ncols() {
        return Err(DgpError::config("cholesky of a non-square matrix"));
    }
    let mut last = 0.0;
    for eps in policy.schedule() {
        last = eps;
        if let Ok(l) = dense::cholesky_lower(k, eps) {
            return Ok(CholeskyFactor { l, jitter: eps });
        }
    }
    Err(DgpError::numerical(
        format!("{n}x{n} matrix is not positive definite", n = k.nrows()),
        last,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Solve `L X = B`.
    Lower,
    /// Solve `L^T X = B`.
    LowerTransposed,
}

pub fn triangular_solve(l: &DMatrix<f64>, b: &DMatrix<f64>, side: Side) -> Result<DMatrix<f64>> {
    if l.nrows() != l.ncols() || l.nrows() != b.nrows() {
        return Err(DgpError::config(format!(
            "triangular solve with {}x{} factor and {}x{} right-hand side",
            l.nrows(),
            l.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let mut x = b.clone();
    let res = match side {
        Side::Lower => dense::solve_lower_in_place(l, &mut x),
        Side::LowerTransposed => dense::solve_lower_transpose_in_place(l, &mut x),
    };
    res.map_err(|e| DgpError::numerical(format!("zero diagonal entry {} in triangular factor", e.index), 0.0))?;
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from, standard_normal_matrix};
    use proptest::prelude::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    #[test]
    fn single_point_gives_variance() {
        let p = KernelParams::new(&[0.7, 2.0], 1.9).unwrap();
        let a = m(1, 2, &[0.3, -1.2]);
        let k = kernel_matrix(&a, &a, &p).unwrap();
        assert_eq!(k.shape(), (1, 1));
        assert!((k[(0, 0)] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn one_dimensional_closed_form() {
        let p = KernelParams::new(&[1.0], 1.0).unwrap();
        let k = kernel_matrix(&m(1, 1, &[0.0]), &m(1, 1, &[2.0]), &p).unwrap();
        assert!((k[(0, 0)] - (-2.0f64).exp()).abs() < 1e-15);
        assert!((k[(0, 0)] - 0.135335).abs() < 1e-6);
    }

    #[test]
    fn scale_invariance() {
        let mut rng = rng_from(5, &[]);
        let a = standard_normal_matrix(&mut rng, 4, 3);
        let b = standard_normal_matrix(&mut rng, 6, 3);
        let p = KernelParams::new(&[0.5, 1.5, 3.0], 2.0).unwrap();
        let p2 = KernelParams::new(&[1.0, 3.0, 6.0], 2.0).unwrap();
        let k1 = kernel_matrix(&a, &b, &p).unwrap();
        let k2 = kernel_matrix(&(&a * 2.0), &(&b * 2.0), &p2).unwrap();
        assert!((k1 - k2).abs().max() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let p = KernelParams::unit(2);
        let err = kernel_matrix(&DMatrix::zeros(2, 3), &DMatrix::zeros(2, 2), &p).unwrap_err();
        assert!(matches!(err, DgpError::Config(_)));
        assert!(kernel_diag(&DMatrix::zeros(1, 1), &p).is_err());
    }

    #[test]
    fn diag_is_constant_and_matches_gram() {
        let p = KernelParams::new(&[0.3, 0.9], 2.5).unwrap();
        let mut rng = rng_from(9, &[]);
        let a = standard_normal_matrix(&mut rng, 5, 2);
        let d = kernel_diag(&a, &p).unwrap();
        assert!(d.iter().all(|&v| v == 2.5f64.ln().exp()));
        let k = kernel_matrix(&a, &a, &p).unwrap();
        for i in 0..5 {
            assert_eq!(k[(i, i)], d[i]);
        }
        assert!(kernel_diag(&DMatrix::zeros(0, 2), &p).unwrap().is_empty());
    }

    #[test]
    fn cholesky_identity_needs_no_jitter() {
        let f = robust_cholesky(&DMatrix::identity(4, 4), &JitterPolicy::default()).unwrap();
        assert_eq!(f.l, DMatrix::identity(4, 4));
        assert_eq!(f.jitter, 0.0);
    }

    #[test]
    fn cholesky_two_by_two() {
        let f = robust_cholesky(&m(2, 2, &[4.0, 2.0, 2.0, 5.0]), &JitterPolicy::default()).unwrap();
        assert_eq!(f.l, m(2, 2, &[2.0, 0.0, 1.0, 2.0]));
        assert_eq!(f.jitter, 0.0);
    }

    #[test]
    fn cholesky_indefinite_needs_jitter_above_one() {
        let k = m(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        // schedule 0, 0.3, 0.6, 1.2, 2.4
        let policy = JitterPolicy::new(0.3, 2.0, 4).unwrap();
        let f = robust_cholesky(&k, &policy).unwrap();
        assert!((f.jitter - 1.2).abs() < 1e-12);
        let rec = &f.l * f.l.transpose();
        let target = &k + DMatrix::identity(2, 2) * f.jitter;
        assert!((rec - target).abs().max() < 1e-10);

        let short = JitterPolicy::new(0.3, 2.0, 2).unwrap();
        match robust_cholesky(&k, &short).unwrap_err() {
            DgpError::Numerical { jitter, .. } => assert!((jitter - 0.6).abs() < 1e-12),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn default_policy_factors_dense_gram_with_duplicates() {
        let mut rng = rng_from(11, &[]);
        let mut a = standard_normal_matrix(&mut rng, 300, 2) * 0.2;
        for i in 0..50 {
            let row = a.row(i).clone_owned();
            a.set_row(150 + i, &row);
        }
        let p = KernelParams::unit(2);
        let k = kernel_matrix(&a, &a, &p).unwrap();
        let f = robust_cholesky(&k, &JitterPolicy::for_variance(p.variance())).unwrap();
        assert!(f.jitter > 0.0);
    }

    #[test]
    fn solves() {
        let l = m(2, 2, &[2.0, 0.0, 1.0, 2.0]);
        let x = triangular_solve(&l, &m(2, 1, &[4.0, 4.0]), Side::Lower).unwrap();
        assert_eq!(x, m(2, 1, &[2.0, 1.0]));
        let b = m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(triangular_solve(&DMatrix::identity(2, 2), &b, Side::LowerTransposed).unwrap(), b);
        assert!(matches!(
            triangular_solve(&m(2, 2, &[1.0, 0.0, 1.0, 0.0]), &b, Side::Lower),
            Err(DgpError::Numerical { .. })
        ));
    }

    #[test]
    fn double_solve_matches_dense_inverse() {
        let mut rng = rng_from(21, &[]);
        let g = standard_normal_matrix(&mut rng, 5, 5);
        let k = &g * g.transpose() + DMatrix::identity(5, 5);
        let b = standard_normal_matrix(&mut rng, 5, 3);
        let l = robust_cholesky(&k, &JitterPolicy::default()).unwrap().l;
        let x = triangular_solve(&l, &triangular_solve(&l, &b, Side::Lower).unwrap(), Side::LowerTransposed).unwrap();
        let oracle = k.try_inverse().unwrap() * &b;
        assert!((x - oracle).abs().max() < 1e-10);
    }

    #[test]
    fn cholesky_is_deterministic() {
        let mut rng = rng_from(4, &[]);
        let a = standard_normal_matrix(&mut rng, 120, 3);
        let k = kernel_matrix(&a, &a, &KernelParams::unit(3)).unwrap();
        let p = JitterPolicy::default();
        let l1 = robust_cholesky(&k, &p).unwrap();
        let l2 = robust_cholesky(&k, &p).unwrap();
        assert_eq!(l1, l2);
    }

    fn points(n: usize, d: usize) -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(-3.0f64..3.0, n * d).prop_map(move |v| DMatrix::from_vec(n, d, v))
    }

    proptest! {
        #[test]
        fn gram_symmetry_and_bounds(a in points(5, 2), b in points(4, 2), l0 in 0.2f64..3.0, l1 in 0.2f64..3.0, s2 in 0.1f64..4.0) {
            let p = KernelParams::new(&[l0, l1], s2).unwrap();
            let kab = kernel_matrix(&a, &b, &p).unwrap();
            let kba = kernel_matrix(&b, &a, &p).unwrap();
            prop_assert!((&kab - kba.transpose()).abs().max() < 1e-13);
            for v in kab.iter() {
                prop_assert!(*v >= 0.0);
                prop_assert!(*v <= p.variance() * (1.0 + 1e-15));
            }
        }
    }
}
