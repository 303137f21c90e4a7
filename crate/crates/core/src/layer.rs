//! A single sparse GP layer in the coupled parameterization (one inducing
//! set, `q(U) = N(m, S)`) or the decoupled one (inducing set `Z_a` for the
//! mean, `Z_b` for the variance), the fixed per-layer mean map, and
//! reparameterized sampling.
//!
//! All predictions are per-point marginals: an `n x d_out` mean and one
//! variance per point shared by every output column, since the covariance
//! factor is shared across a layer's outputs.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::autodiff::tri_factor_value;
use crate::error::{DgpError, Result};
use crate::kernel::{JitterPolicy, KernelParams};
use crate::params::{BlockId, BlockKind, ParamFilter};

/// Relative floor applied to predictive variances, as a multiple of the signal variance.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Mean parameterization of a decoupled layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanVariant {
    /// `mu = K_XZa a`.
    Cb,
    /// `mu = K_XZa K_ZaZa^{-1} m`.
    Gp,
    /// `mu = K_XZa L^{-T} m'` with `L L^T = K_ZaZa`.
    GpCent,
}

/// Variance parameterization of a decoupled layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarVariant {
    /// Sparse-GP form on `Z_b` with `S = L_b L_b^T`.
    Cb,
    /// `Sigma = K_XX - K_XZb (B^{-1} + K_ZbZb)^{-1} K_ZbX` with `B = L_b L_b^T`.
    Gp,
}

impl fmt::Display for MeanVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MeanVariant::Cb => "cb",
            MeanVariant::Gp => "gp",
            MeanVariant::GpCent => "gpcent",
        })
    }
}

impl FromStr for MeanVariant {
    type Err = DgpError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cb" => Ok(MeanVariant::Cb),
            "gp" => Ok(MeanVariant::Gp),
            "gpcent" => Ok(MeanVariant::GpCent),
            _ => Err(DgpError::config(format!("unknown mean variant `{s}` (cb, gp, gpcent)"))),
        }
    }
}

impl fmt::Display for VarVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VarVariant::Cb => "cb",
            VarVariant::Gp => "gp",
        })
    }
}

impl FromStr for VarVariant {
    type Err = DgpError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cb" => Ok(VarVariant::Cb),
            "gp" => Ok(VarVariant::Gp),
            _ => Err(DgpError::config(format!("unknown variance variant `{s}` (cb, gp)"))),
        }
    }
}

/// Fixed linear map `X W` added to a layer's predictive mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticMeanMap {
    #[serde(with = "crate::serde_matrix")]
    pub weights: DMatrix<f64>,
}

impl StaticMeanMap {
    /// Identity for equal widths; otherwise the leading `min(d_in, d_out)`
    /// block of the identity, padded with zeros.
    pub fn for_dims(d_in: usize, d_out: usize) -> Self {
        StaticMeanMap {
            weights: DMatrix::identity(d_in, d_out),
        }
    }

    pub fn zero(d_in: usize, d_out: usize) -> Self {
        StaticMeanMap {
            weights: DMatrix::zeros(d_in, d_out),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.ncols()
    }
}

/// Convert a lower-triangular factor with positive diagonal into its
/// unconstrained storage (log-diagonal).
pub fn factor_to_raw(l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if l.nrows() != l.ncols() {
        return Err(DgpError::config("covariance factor must be square"));
    }
    let mut raw = l.clone();
    for j in 0..l.ncols() {
        for i in 0..j {
            if l[(i, j)] != 0.0 {
                return Err(DgpError::config("covariance factor must be lower triangular"));
            }
        }
        let d = l[(j, j)];
        if !(d > 0.0) || !d.is_finite() {
            return Err(DgpError::config("covariance factor needs a strictly positive diagonal"));
        }
        raw[(j, j)] = d.ln();
    }
    Ok(raw)
}

/// One coupled sparse GP layer: inducing inputs `Z`, variational mean `m`
/// (one column per output) and a shared covariance factor `S = L_s L_s^T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledLayerState {
    #[serde(with = "crate::serde_matrix")]
    pub inducing: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub mean: DMatrix<f64>,
    /// `L_s` with its diagonal stored as logs.
    #[serde(with = "crate::serde_matrix")]
    pub factor_raw: DMatrix<f64>,
    pub kernel: KernelParams,
}

impl CoupledLayerState {
    pub fn new(inducing: DMatrix<f64>, mean: DMatrix<f64>, factor: &DMatrix<f64>, kernel: KernelParams) -> Result<Self> {
        let s = CoupledLayerState {
            inducing,
            mean,
            factor_raw: factor_to_raw(factor)?,
            kernel,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.inducing.nrows();
        if self.inducing.ncols() != self.kernel.dim() {
            return Err(DgpError::config("inducing inputs and kernel disagree on input dimension"));
        }
        if self.mean.nrows() != m || self.factor_raw.shape() != (m, m) {
            return Err(DgpError::config(format!(
                "coupled layer with {m} inducing points has mean {:?} and factor {:?}",
                self.mean.shape(),
                self.factor_raw.shape()
            )));
        }
        Ok(())
    }

    /// `L_s`.
    pub fn covariance_factor(&self) -> DMatrix<f64> {
        tri_factor_value(&self.factor_raw)
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.inducing.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.mean.ncols()
    }
}

/// One decoupled layer. `mean_param` is `a`, `m` or `m'` depending on the
/// [`MeanVariant`]; `factor_raw` holds `L_b` (log-diagonal).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoupledLayerState {
    #[serde(with = "crate::serde_matrix")]
    pub inducing_mean: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub inducing_var: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub mean_param: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub factor_raw: DMatrix<f64>,
    pub kernel: KernelParams,
}

impl DecoupledLayerState {
    pub fn new(
        inducing_mean: DMatrix<f64>,
        inducing_var: DMatrix<f64>,
        mean_param: DMatrix<f64>,
        factor: &DMatrix<f64>,
        kernel: KernelParams,
    ) -> Result<Self> {
        let s = DecoupledLayerState {
            inducing_mean,
            inducing_var,
            mean_param,
            factor_raw: factor_to_raw(factor)?,
            kernel,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.kernel.dim();
        if self.inducing_mean.ncols() != d || self.inducing_var.ncols() != d {
            return Err(DgpError::config("inducing inputs and kernel disagree on input dimension"));
        }
        let (ma, mb) = (self.inducing_mean.nrows(), self.inducing_var.nrows());
        if self.mean_param.nrows() != ma {
            return Err(DgpError::config(format!(
                "mean parameter has {} rows but there are {ma} mean inducing points",
                self.mean_param.nrows()
            )));
        }
        if self.factor_raw.shape() != (mb, mb) {
            return Err(DgpError::config(format!(
                "variance factor is {:?} but there are {mb} variance inducing points",
                self.factor_raw.shape()
            )));
        }
        Ok(())
    }

    /// `L_b`.
    pub fn variance_factor(&self) -> DMatrix<f64> {
        tri_factor_value(&self.factor_raw)
    }

    pub fn input_dim(&self) -> usize {
        self.inducing_mean.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.mean_param.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerState {
    Coupled(CoupledLayerState),
    Decoupled(DecoupledLayerState),
}

impl LayerState {
    pub fn input_dim(&self) -> usize {
        match self {
            LayerState::Coupled(l) => l.input_dim(),
            LayerState::Decoupled(l) => l.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            LayerState::Coupled(l) => l.output_dim(),
            LayerState::Decoupled(l) => l.output_dim(),
        }
    }

    pub fn kernel(&self) -> &KernelParams {
        match self {
            LayerState::Coupled(l) => &l.kernel,
            LayerState::Decoupled(l) => &l.kernel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LayerState::Coupled(l) => l.validate(),
            LayerState::Decoupled(l) => l.validate(),
        }
    }
}

/// Per-point predictive marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: DMatrix<f64>,
    pub var: DVector<f64>,
}

// ---------------------------------------------------------------------------
// Tape construction

pub(crate) struct KernelVars {
    pub log_ls: Var,
    pub log_var: Var,
}

pub(crate) enum LayerVars {
    Coupled {
        z: Var,
        mean: Var,
        raw: Var,
        kernel: KernelVars,
    },
    Decoupled {
        z_mean: Var,
        z_var: Var,
        mean_param: Var,
        raw: Var,
        kernel: KernelVars,
        mv: MeanVariant,
        vv: VarVariant,
    },
}

/// Registers parameter blocks on a tape, as leaves when the filter allows
/// it and as constants otherwise.
pub(crate) struct Registrar<'a> {
    pub filter: Option<&'a ParamFilter>,
    pub entries: Vec<(BlockId, Var)>,
}

impl<'a> Registrar<'a> {
    pub fn new(filter: Option<&'a ParamFilter>) -> Self {
        Registrar { filter, entries: Vec::new() }
    }

    pub fn param(&mut self, tape: &mut Tape, layer: Option<usize>, kind: BlockKind, name: &str, value: DMatrix<f64>) -> Var {
        match self.filter {
            Some(f) if f.allows(kind) => {
                let v = tape.leaf(value);
                self.entries.push((
                    BlockId {
                        layer,
                        kind,
                        name: name.to_string(),
                    },
                    v,
                ));
                v
            }
            _ => tape.constant(value),
        }
    }

    fn kernel(&mut self, tape: &mut Tape, layer: usize, k: &KernelParams) -> KernelVars {
        let log_ls = self.param(
            tape,
            Some(layer),
            BlockKind::LogLengthscales,
            "log_lengthscales",
            DMatrix::from_column_slice(k.dim(), 1, &k.log_lengthscales),
        );
        let log_var = self.param(
            tape,
            Some(layer),
            BlockKind::LogVariance,
            "log_variance",
            DMatrix::from_element(1, 1, k.log_variance),
        );
        KernelVars { log_ls, log_var }
    }

    pub fn layer(
        &mut self,
        tape: &mut Tape,
        index: usize,
        layer: &LayerState,
        variants: Option<(MeanVariant, VarVariant)>,
    ) -> Result<LayerVars> {
        layer.validate()?;
        Ok(match layer {
            LayerState::Coupled(l) => LayerVars::Coupled {
                z: self.param(tape, Some(index), BlockKind::InducingMean, "z", l.inducing.clone()),
                mean: self.param(tape, Some(index), BlockKind::VariationalMean, "m", l.mean.clone()),
                raw: self.param(tape, Some(index), BlockKind::VariationalFactor, "l_s", l.factor_raw.clone()),
                kernel: self.kernel(tape, index, &l.kernel),
            },
            LayerState::Decoupled(l) => {
                let (mv, vv) = variants.ok_or_else(|| DgpError::config("decoupled layer needs mean and variance variants"))?;
                let mean_name = match mv {
                    MeanVariant::Cb => "a",
                    MeanVariant::Gp => "m",
                    MeanVariant::GpCent => "m_prime",
                };
                LayerVars::Decoupled {
                    z_mean: self.param(tape, Some(index), BlockKind::InducingMean, "z_a", l.inducing_mean.clone()),
                    z_var: self.param(tape, Some(index), BlockKind::InducingVar, "z_b", l.inducing_var.clone()),
                    mean_param: self.param(tape, Some(index), BlockKind::VariationalMean, mean_name, l.mean_param.clone()),
                    raw: self.param(tape, Some(index), BlockKind::VariationalFactor, "l_b", l.factor_raw.clone()),
                    kernel: self.kernel(tape, index, &l.kernel),
                    mv,
                    vv,
                }
            }
        })
    }
}

enum VarPath {
    /// `var = s2 - |L^{-1} K_ZX|^2 + |G^T L^{-1} K_ZX|^2` per column, `G = L^{-1} L_s`.
    SForm { z: Var, chol: Var, g: Var },
    /// `var = s2 - |L_C^{-1} L_b^T K_ZX|^2` per column, `L_C L_C^T = I + L_b^T K_ZZ L_b`.
    BForm { z: Var, lb: Var, chol_c: Var },
}

/// The input-independent part of a layer: factorizations, mean weights and the KL term.
pub(crate) struct PreparedLayer {
    log_ls: Var,
    log_var: Var,
    s2: f64,
    z_mean: Var,
    /// Mean weights: `mu = K_X,Zmean alpha`.
    alpha: Var,
    var_path: VarPath,
    pub kl: Var,
}

fn jitter_for(tape: &Tape, log_var: Var) -> JitterPolicy {
    JitterPolicy::for_variance(tape.scalar_value(log_var).exp())
}

/// `0.5 * d_out * (log|K| - log|S| + tr(K^{-1} S) - M)` from `chol(K)`, `G = L^{-1} L_s` and raw `L_s`.
fn s_form_kl(tape: &mut Tape, chol: Var, g: Var, raw: Var, d_out: usize) -> Result<Var> {
    let m = tape.shape(chol).0 as f64;
    let logdet_k = tape.log_diag_sum(chol);
    let logdet_s = tape.diag_sum(raw);
    let tr = tape.sum_squares(g);
    let a = tape.sub(logdet_k, logdet_s)?;
    let a = tape.scale(a, 2.0);
    let b = tape.add(a, tr)?;
    let neg_m = tape.constant(DMatrix::from_element(1, 1, -m));
    let c = tape.add(b, neg_m)?;
    Ok(tape.scale(c, 0.5 * d_out as f64))
}

/// Cholesky factor of `K(z, z) + nugget * s2 * I`.
fn gram_factor(tape: &mut Tape, z: Var, kernel: &KernelVars, nugget: f64, policy: &JitterPolicy) -> Result<Var> {
    let mut k = tape.rbf(z, z, kernel.log_ls, kernel.log_var)?;
    if nugget > 0.0 {
        let m = tape.shape(k).0;
        let eye = tape.constant(DMatrix::identity(m, m) * nugget);
        let s2 = tape.exp(kernel.log_var);
        let shift = tape.scale_by(eye, s2);
        k = tape.add(k, shift)?;
    }
    tape.cholesky(k, policy)
}

/// Factorize and compute the KL of one layer. `nugget` is a fixed diagonal
/// term, relative to the signal variance, added to every inducing Gram
/// matrix that gets factorized.
pub(crate) fn prepare(tape: &mut Tape, vars: &LayerVars, nugget: f64) -> Result<PreparedLayer> {
    match vars {
        LayerVars::Coupled { z, mean, raw, kernel } => {
            let d_out = tape.shape(*mean).1;
            let policy = jitter_for(tape, kernel.log_var);
            let chol = gram_factor(tape, *z, kernel, nugget, &policy)?;
            let white = tape.solve_lower(chol, *mean)?;
            let alpha = tape.solve_lower_t(chol, white)?;
            let ls = tape.tri_factor(*raw);
            let g = tape.solve_lower(chol, ls)?;
            let quad = tape.sum_squares(white);
            let quad = tape.scale(quad, 0.5);
            let cov = s_form_kl(tape, chol, g, *raw, d_out)?;
            let kl = tape.add(quad, cov)?;
            Ok(PreparedLayer {
                log_ls: kernel.log_ls,
                log_var: kernel.log_var,
                s2: tape.scalar_value(kernel.log_var).exp(),
                z_mean: *z,
                alpha,
                var_path: VarPath::SForm { z: *z, chol, g },
                kl,
            })
        }
        LayerVars::Decoupled {
            z_mean,
            z_var,
            mean_param,
            raw,
            kernel,
            mv,
            vv,
        } => {
            let d_out = tape.shape(*mean_param).1;
            let policy = jitter_for(tape, kernel.log_var);
            let (alpha, mean_kl) = match mv {
                MeanVariant::Cb => {
                    let kaa = tape.rbf(*z_mean, *z_mean, kernel.log_ls, kernel.log_var)?;
                    let ka = tape.matmul(kaa, *mean_param)?;
                    let quad = tape.mul(*mean_param, ka)?;
                    let quad = tape.sum(quad);
                    (*mean_param, tape.scale(quad, 0.5))
                }
                MeanVariant::Gp => {
                    let chol = gram_factor(tape, *z_mean, kernel, nugget, &policy)?;
                    let white = tape.solve_lower(chol, *mean_param)?;
                    let alpha = tape.solve_lower_t(chol, white)?;
                    let quad = tape.sum_squares(white);
                    (alpha, tape.scale(quad, 0.5))
                }
                MeanVariant::GpCent => {
                    let chol = gram_factor(tape, *z_mean, kernel, nugget, &policy)?;
                    let alpha = tape.solve_lower_t(chol, *mean_param)?;
                    let quad = tape.sum_squares(*mean_param);
                    (alpha, tape.scale(quad, 0.5))
                }
            };
            let lb = tape.tri_factor(*raw);
            let (var_path, var_kl) = match vv {
                VarVariant::Gp => {
                    let kbb = tape.rbf(*z_var, *z_var, kernel.log_ls, kernel.log_var)?;
                    let mb = tape.shape(kbb).0;
                    let kl_b = tape.matmul(kbb, lb)?;
                    let inner = tape.matmul_t(lb, true, kl_b, false)?;
                    let c = tape.add_identity(inner);
                    let chol_c = tape.cholesky(c, &JitterPolicy::default())?;
                    let eye = tape.constant(DMatrix::identity(mb, mb));
                    let inv = tape.solve_lower(chol_c, eye)?;
                    let logdet = tape.log_diag_sum(chol_c);
                    let logdet = tape.scale(logdet, 2.0);
                    let tr = tape.sum_squares(inv);
                    let s = tape.add(logdet, tr)?;
                    let neg_m = tape.constant(DMatrix::from_element(1, 1, -(mb as f64)));
                    let s = tape.add(s, neg_m)?;
                    (VarPath::BForm { z: *z_var, lb, chol_c }, tape.scale(s, 0.5 * d_out as f64))
                }
                VarVariant::Cb => {
                    let chol = gram_factor(tape, *z_var, kernel, nugget, &policy)?;
                    let g = tape.solve_lower(chol, lb)?;
                    let kl = s_form_kl(tape, chol, g, *raw, d_out)?;
                    (VarPath::SForm { z: *z_var, chol, g }, kl)
                }
            };
            let kl = tape.add(mean_kl, var_kl)?;
            Ok(PreparedLayer {
                log_ls: kernel.log_ls,
                log_var: kernel.log_var,
                s2: tape.scalar_value(kernel.log_var).exp(),
                z_mean: *z_mean,
                alpha,
                var_path,
                kl,
            })
        }
    }
}

/// Predictive marginals for inputs `x`: `(n x d_out mean, n x 1 variance)`.
pub(crate) fn predict_on_tape(tape: &mut Tape, prep: &PreparedLayer, x: Var) -> Result<(Var, Var)> {
    let k_mean_x = tape.rbf(prep.z_mean, x, prep.log_ls, prep.log_var)?;
    let mean = tape.matmul_t(k_mean_x, true, prep.alpha, false)?;
    let reduction = match &prep.var_path {
        VarPath::SForm { z, chol, g } => {
            let kzx = if *z == prep.z_mean { k_mean_x } else { tape.rbf(*z, x, prep.log_ls, prep.log_var)? };
            let a = tape.solve_lower(*chol, kzx)?;
            let ga = tape.matmul_t(*g, true, a, false)?;
            let t1 = tape.col_sum_squares(a);
            let t2 = tape.col_sum_squares(ga);
            tape.sub(t2, t1)?
        }
        VarPath::BForm { z, lb, chol_c } => {
            let kzx = tape.rbf(*z, x, prep.log_ls, prep.log_var)?;
            let p = tape.matmul_t(*lb, true, kzx, false)?;
            let q = tape.solve_lower(*chol_c, p)?;
            let t = tape.col_sum_squares(q);
            tape.scale(t, -1.0)
        }
    };
    let s2 = tape.exp(prep.log_var);
    let var = tape.add_scalar(reduction, s2);
    let var = tape.floor(var, VARIANCE_FLOOR * prep.s2);
    Ok((mean, var))
}

/// Apply the fixed mean map on the tape: `mean + x W`.
pub(crate) fn static_mean_on_tape(tape: &mut Tape, x: Var, map: &StaticMeanMap, mean: Var) -> Result<Var> {
    let w = tape.constant(map.weights.clone());
    let xw = tape.matmul(x, w)?;
    tape.add(mean, xw)
}

/// Reparameterized draw `mean + sqrt(var) * noise` on the tape.
pub(crate) fn sample_on_tape(tape: &mut Tape, mean: Var, var: Var, noise: DMatrix<f64>) -> Result<Var> {
    let noise = tape.constant(noise);
    let sd = tape.sqrt(var);
    let scaled = tape.scale_rows(noise, sd)?;
    tape.add(mean, scaled)
}

// ---------------------------------------------------------------------------
// Plain evaluation

fn eval_layer(x: &DMatrix<f64>, layer: &LayerState, variants: Option<(MeanVariant, VarVariant)>) -> Result<Prediction> {
    if x.ncols() != layer.input_dim() {
        return Err(DgpError::config(format!(
            "inputs have {} columns but the layer expects {}",
            x.ncols(),
            layer.input_dim()
        )));
    }
    let mut tape = Tape::new();
    let vars = Registrar::new(None).layer(&mut tape, 0, layer, variants)?;
    let prep = prepare(&mut tape, &vars, 0.0)?;
    let xv = tape.constant(x.clone());
    let (mean, var) = predict_on_tape(&mut tape, &prep, xv)?;
    Ok(Prediction {
        mean: tape.value(mean).clone(),
        var: DVector::from_column_slice(tape.value(var).as_slice()),
    })
}

/// Predictive marginals of a coupled layer:
/// `mu = K_XZ K_ZZ^{-1} m`, `var = diag(K_XX - K_XZ K_ZZ^{-1} (K_ZZ - S) K_ZZ^{-1} K_ZX)`.
pub fn coupled_predict(x: &DMatrix<f64>, layer: &CoupledLayerState) -> Result<Prediction> {
    eval_layer(x, &LayerState::Coupled(layer.clone()), None)
}

/// Predictive marginals of a decoupled layer under the given parameterizations.
pub fn decoupled_predict(x: &DMatrix<f64>, layer: &DecoupledLayerState, mv: MeanVariant, vv: VarVariant) -> Result<Prediction> {
    eval_layer(x, &LayerState::Decoupled(layer.clone()), Some((mv, vv)))
}

/// `layer_mean + X W`.
pub fn apply_static_mean(x: &DMatrix<f64>, map: &StaticMeanMap, layer_mean: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != map.input_dim() || layer_mean.shape() != (x.nrows(), map.output_dim()) {
        return Err(DgpError::config(format!(
            "static mean map {}x{} cannot combine inputs {:?} with layer mean {:?}",
            map.input_dim(),
            map.output_dim(),
            x.shape(),
            layer_mean.shape()
        )));
    }
    Ok(layer_mean + x * &map.weights)
}

/// `mean + sqrt(var) * noise`, with the variance broadcast across output columns.
pub fn sample_layer(mean: &DMatrix<f64>, var: &DVector<f64>, noise: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if noise.shape() != mean.shape() || var.len() != mean.nrows() {
        return Err(DgpError::config("sample_layer: shape mismatch"));
    }
    if let Some(i) = var.iter().position(|v| !(*v >= 0.0)) {
        return Err(DgpError::numerical(format!("negative predictive variance {} at point {i}", var[i]), 0.0));
    }
    let mut out = mean.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        for (i, v) in col.iter_mut().enumerate() {
            *v += var[i].sqrt() * noise[(i, j)];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{kernel_matrix, robust_cholesky};
    use crate::rng::{rng_from, standard_normal_matrix};

    fn setup(m: usize, d: usize, d_out: usize, seed: u64) -> (DMatrix<f64>, KernelParams, DMatrix<f64>, DMatrix<f64>) {
        let mut rng = rng_from(seed, &[]);
        let z = standard_normal_matrix(&mut rng, m, d);
        let kp = KernelParams::new(&vec![1.3; d], 1.7).unwrap();
        let mean = standard_normal_matrix(&mut rng, m, d_out);
        let g = standard_normal_matrix(&mut rng, m, m) * 0.3;
        (z, kp, mean, g)
    }

    #[test]
    fn inducing_at_inputs_collapses_to_q() {
        let (z, kp, m, g) = setup(5, 2, 2, 1);
        let s_target = &g * g.transpose() + DMatrix::identity(5, 5) * 0.1;
        let ls = robust_cholesky(&s_target, &JitterPolicy::default()).unwrap().l;
        let layer = CoupledLayerState::new(z.clone(), m.clone(), &ls, kp).unwrap();
        let p = coupled_predict(&z, &layer).unwrap();
        assert!((&p.mean - &m).abs().max() < 1e-8);
        for i in 0..5 {
            assert!((p.var[i] - s_target[(i, i)]).abs() < 1e-8);
        }
    }

    #[test]
    fn prior_state_gives_prior_marginals() {
        let (z, kp, _, _) = setup(6, 2, 1, 2);
        let kzz = kernel_matrix(&z, &z, &kp).unwrap();
        let l = robust_cholesky(&kzz, &JitterPolicy::default()).unwrap().l;
        let layer = CoupledLayerState::new(z, DMatrix::zeros(6, 1), &l, kp.clone()).unwrap();
        let x = standard_normal_matrix(&mut rng_from(3, &[]), 7, 2);
        let p = coupled_predict(&x, &layer).unwrap();
        assert!(p.mean.iter().all(|v| *v == 0.0));
        assert!(p.var.iter().all(|v| (v - kp.variance()).abs() < 1e-10));
    }

    #[test]
    fn zero_mean_parameter_gives_zero_mean() {
        let (z, kp, _, _) = setup(4, 2, 3, 4);
        let x = standard_normal_matrix(&mut rng_from(5, &[]), 6, 2);
        let layer = DecoupledLayerState::new(
            z.clone(),
            z.rows(0, 2).into_owned(),
            DMatrix::zeros(4, 3),
            &(DMatrix::identity(2, 2) * 0.5),
            kp,
        )
        .unwrap();
        for mv in [MeanVariant::Cb, MeanVariant::Gp, MeanVariant::GpCent] {
            for vv in [VarVariant::Cb, VarVariant::Gp] {
                let p = decoupled_predict(&x, &layer, mv, vv).unwrap();
                assert_eq!(p.mean.shape(), (6, 3));
                assert!(p.mean.iter().all(|v| *v == 0.0));
                assert!(p.var.iter().all(|v| *v > 0.0));
            }
        }
    }

    #[test]
    fn vanishing_b_gives_prior_variance() {
        let (z, kp, m, _) = setup(5, 2, 1, 6);
        let x = standard_normal_matrix(&mut rng_from(7, &[]), 8, 2);
        let mut prev = 0.0;
        for scale in [1e-2, 1e-4, 1e-6] {
            let layer = DecoupledLayerState::new(z.clone(), z.clone(), m.clone(), &(DMatrix::identity(5, 5) * scale), kp.clone()).unwrap();
            let p = decoupled_predict(&x, &layer, MeanVariant::GpCent, VarVariant::Gp).unwrap();
            let gap = p.var.iter().map(|v| (kp.variance() - v).abs()).fold(0.0, f64::max);
            assert!(gap < 10.0 * scale * scale, "scale {scale}: gap {gap}");
            assert!(prev == 0.0 || gap < prev);
            prev = gap;
        }
    }

    #[test]
    fn gpcent_matches_gp_under_whitening() {
        let (z, kp, m, g) = setup(6, 2, 2, 8);
        let kzz = kernel_matrix(&z, &z, &kp).unwrap();
        let l = robust_cholesky(&kzz, &JitterPolicy::default()).unwrap().l;
        let m_white = crate::kernel::triangular_solve(&l, &m, crate::kernel::Side::Lower).unwrap();
        let lb = robust_cholesky(&(&g * g.transpose() + DMatrix::identity(6, 6)), &JitterPolicy::default()).unwrap().l;
        let x = standard_normal_matrix(&mut rng_from(9, &[]), 10, 2);
        let gp = DecoupledLayerState::new(z.clone(), z.clone(), m, &lb, kp.clone()).unwrap();
        let cent = DecoupledLayerState::new(z.clone(), z, m_white, &lb, kp).unwrap();
        let a = decoupled_predict(&x, &gp, MeanVariant::Gp, VarVariant::Gp).unwrap();
        let b = decoupled_predict(&x, &cent, MeanVariant::GpCent, VarVariant::Gp).unwrap();
        let scale = a.mean.abs().max().max(1.0);
        assert!((a.mean - b.mean).abs().max() < 1e-10 * scale);
    }

    #[test]
    fn static_mean_maps() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let zero_out = DMatrix::zeros(2, 3);
        assert_eq!(apply_static_mean(&x, &StaticMeanMap::for_dims(3, 3), &zero_out).unwrap(), x);
        let out = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, 1.0, 2.0]);
        assert_eq!(apply_static_mean(&x, &StaticMeanMap::zero(3, 2), &out).unwrap(), out);
        let got = apply_static_mean(&x, &StaticMeanMap::for_dims(3, 2), &out).unwrap();
        assert_eq!(got, DMatrix::from_row_slice(2, 2, &[1.5, 1.5, 5.0, 7.0]));
        let pad = StaticMeanMap::for_dims(2, 4);
        assert_eq!(pad.weights.columns(2, 2), DMatrix::zeros(2, 2));
        assert_eq!(pad.weights.columns(0, 2), DMatrix::identity(2, 2));
        assert!(apply_static_mean(&x, &StaticMeanMap::for_dims(2, 2), &out).is_err());
    }

    #[test]
    fn sampling_edge_cases() {
        let mean = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let var = DVector::from_vec(vec![0.5, 2.0]);
        assert_eq!(sample_layer(&mean, &var, &DMatrix::zeros(2, 2)).unwrap(), mean);
        let noise = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 2.0, 0.5]);
        assert_eq!(sample_layer(&mean, &DVector::zeros(2), &noise).unwrap(), mean);
        assert!(matches!(
            sample_layer(&mean, &DVector::from_vec(vec![0.1, -1e-3]), &noise),
            Err(DgpError::Numerical { .. })
        ));
    }

    #[test]
    fn sampling_moments() {
        let n = 100_000;
        let mean = DMatrix::from_element(n, 1, 0.7);
        let var = DVector::from_element(n, 2.5);
        let noise = standard_normal_matrix(&mut rng_from(10, &[]), n, 1);
        let s = sample_layer(&mean, &var, &noise).unwrap();
        let mu = s.mean();
        let v = s.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n as f64 - 1.0);
        let se_mean = (2.5 / n as f64).sqrt();
        let se_var = 2.5 * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((mu - 0.7).abs() < 3.0 * se_mean, "mean {mu}");
        assert!((v - 2.5).abs() < 3.0 * se_var, "var {v}");
    }

    #[test]
    fn factor_validation() {
        assert!(factor_to_raw(&DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0])).is_err());
        assert!(factor_to_raw(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])).is_err());
        let l = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, -0.5, 0.25]);
        let raw = factor_to_raw(&l).unwrap();
        assert!((tri_factor_value(&raw) - l).abs().max() < 1e-15);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("GPcent".parse::<MeanVariant>().unwrap(), MeanVariant::GpCent);
        assert_eq!("gp".parse::<VarVariant>().unwrap(), VarVariant::Gp);
        assert!("nope".parse::<MeanVariant>().is_err());
        assert_eq!(MeanVariant::GpCent.to_string(), "gpcent");
    }
}
