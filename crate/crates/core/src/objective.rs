//! The evidence lower bound: Gaussian expected log-likelihood of the final
//! layer plus the per-layer KL terms.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{DgpError, Result};
use crate::layer::{prepare, sample_on_tape, CoupledLayerState, DecoupledLayerState, LayerState, MeanVariant, Registrar, VarVariant};
use crate::model::{layer_output, register, DgpModel, ModelVars};
use crate::rng::{rng_from, standard_normal_matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub total: f64,
    /// Batch sum of the expected log-likelihood, before rescaling.
    pub expected_log_lik: f64,
    pub kl_per_layer: Vec<f64>,
    /// `N / batch size`.
    pub scale_factor: f64,
}

fn kl_of(layer: LayerState, variants: Option<(MeanVariant, VarVariant)>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = Registrar::new(None).layer(&mut tape, 0, &layer, variants)?;
    let prep = prepare(&mut tape, &vars, 0.0)?;
    Ok(tape.scalar_value(prep.kl))
}

/// `KL[N(m_k, S) || N(0, K_ZZ)]` summed over the output columns `k`.
pub fn kl_coupled(layer: &CoupledLayerState) -> Result<f64> {
    kl_of(LayerState::Coupled(layer.clone()), None)
}

/// KL of a decoupled layer. With `vv = Gp` this is
/// `mean term + 0.5 d_out (log|I + K_bb B| - tr(K_bb (B^{-1} + K_bb)^{-1}))`;
/// the mean term is `0.5 a^T K_aa a`, `0.5 m^T K_aa^{-1} m` or `0.5 m'^T m'`.
/// With `vv = Cb` the variance term is the Gaussian KL of `S = L_b L_b^T` against `K_bb`.
pub fn kl_decoupled(layer: &DecoupledLayerState, mv: MeanVariant, vv: VarVariant) -> Result<f64> {
    kl_of(LayerState::Decoupled(layer.clone()), Some((mv, vv)))
}

/// `sum_{i,j} E_{f ~ N(mean_ij, var_i)} log N(y_ij | f, noise_var)`.
pub fn expected_log_lik_gaussian(y: &DMatrix<f64>, mean: &DMatrix<f64>, var: &DVector<f64>, noise_var: f64) -> Result<f64> {
    if y.shape() != mean.shape() || var.len() != y.nrows() {
        return Err(DgpError::config("expected_log_lik_gaussian: shape mismatch"));
    }
    if !(noise_var > 0.0) {
        return Err(DgpError::config("noise variance must be positive"));
    }
    let c = -0.5 * (2.0 * std::f64::consts::PI * noise_var).ln();
    let mut total = 0.0;
    for j in 0..y.ncols() {
        for i in 0..y.nrows() {
            let r = y[(i, j)] - mean[(i, j)];
            total += c - (r * r + var[i]) / (2.0 * noise_var);
        }
    }
    Ok(total)
}

pub(crate) struct ElboVars {
    pub total: Var,
    pub expected_log_lik: Var,
    pub kls: Vec<Var>,
    pub scale_factor: f64,
}

/// Record the ELBO of `model` on a batch. Layer `l < L-1` is sampled with
/// noise from the stream `(seed, l)`; the last layer enters analytically.
pub(crate) fn build_elbo(
    tape: &mut Tape,
    model: &DgpModel,
    vars: &ModelVars,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    full_size: usize,
    seed: u64,
) -> Result<ElboVars> {
    let n = x.nrows();
    if n == 0 || y.nrows() != n {
        return Err(DgpError::config(format!("batch has {n} inputs and {} targets", y.nrows())));
    }
    if y.ncols() != model.output_dim() || x.ncols() != model.input_dim() {
        return Err(DgpError::config(format!(
            "batch is {}->{} but the model maps {}->{}",
            x.ncols(),
            y.ncols(),
            model.input_dim(),
            model.output_dim()
        )));
    }
    if full_size < n {
        return Err(DgpError::config("full data size smaller than the batch"));
    }
    let mut kls = Vec::with_capacity(model.layers.len());
    let mut h = tape.constant(x.clone());
    let last = model.layers.len() - 1;
    let mut out = None;
    for (l, lv) in vars.layers.iter().enumerate() {
        let prep = prepare(tape, lv, model.inducing_jitter)?;
        kls.push(prep.kl);
        let (mean, var) = layer_output(tape, &prep, &model.mean_maps[l], h)?;
        if l == last {
            out = Some((mean, var));
        } else {
            let noise = standard_normal_matrix(&mut rng_from(seed, &[l as u64]), n, tape.shape(mean).1);
            h = sample_on_tape(tape, mean, var, noise)?;
        }
    }
    let (mean, var) = out.expect("model has a final layer");
    let d_y = y.ncols() as f64;
    let yv = tape.constant(y.clone());
    let resid = tape.sub(yv, mean)?;
    let sq = tape.sum_squares(resid);
    let vsum = tape.sum(var);
    let vsum = tape.scale(vsum, d_y);
    let spread = tape.add(sq, vsum)?;
    let neg_log_noise = tape.scale(vars.log_noise, -1.0);
    let inv_noise = tape.exp(neg_log_noise);
    let quad = tape.mul(spread, inv_noise)?;
    let quad = tape.scale(quad, -0.5);
    let count = n as f64 * d_y;
    let lognorm = tape.scale(vars.log_noise, -0.5 * count);
    let c = tape.constant(DMatrix::from_element(1, 1, -0.5 * count * (2.0 * std::f64::consts::PI).ln()));
    let ell = tape.add(quad, lognorm)?;
    let ell = tape.add(ell, c)?;
    let scale_factor = full_size as f64 / n as f64;
    let mut total = tape.scale(ell, scale_factor);
    for kl in &kls {
        total = tape.sub(total, *kl)?;
    }
    Ok(ElboVars {
        total,
        expected_log_lik: ell,
        kls,
        scale_factor,
    })
}

pub(crate) fn read_estimate(tape: &Tape, e: &ElboVars) -> ElboEstimate {
    ElboEstimate {
        total: tape.scalar_value(e.total),
        expected_log_lik: tape.scalar_value(e.expected_log_lik),
        kl_per_layer: e.kls.iter().map(|k| tape.scalar_value(*k)).collect(),
        scale_factor: e.scale_factor,
    }
}

/// Single-path ELBO estimate on a batch drawn from a dataset of `full_size` points.
pub fn elbo(model: &DgpModel, x: &DMatrix<f64>, y: &DMatrix<f64>, full_size: usize, seed: u64) -> Result<ElboEstimate> {
    let mut tape = Tape::new();
    let mut reg = Registrar::new(None);
    let vars = register(&mut tape, &mut reg, model)?;
    let e = build_elbo(&mut tape, model, &vars, x, y, full_size, seed)?;
    Ok(read_estimate(&tape, &e))
}
