//! The deep GP stack: construction, parameter access, sampled prediction,
//! test metrics and the model document format.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{init_inducing, Normalizer};
use crate::error::{DgpError, Result};
use crate::kernel::{kernel_matrix, robust_cholesky, JitterPolicy, KernelParams};
use crate::layer::{
    predict_on_tape, prepare, sample_on_tape, static_mean_on_tape, CoupledLayerState, DecoupledLayerState,
    LayerState, LayerVars, MeanVariant, PreparedLayer, Registrar, StaticMeanMap, VarVariant,
};
use crate::params::{BlockId, BlockKind, ParamFilter};
use crate::rng::{derive_seed, rng_from, standard_normal_matrix};

pub const MODEL_FORMAT: &str = "dgp-model";
pub const MODEL_VERSION: u32 = 1;

/// Initial likelihood noise variance on standardized targets.
pub const INITIAL_NOISE_VAR: f64 = 0.05;
/// Initial `L_b` scale for the decoupled `B` parameterization.
pub const INITIAL_B_SCALE: f64 = 1e-3;
/// Initial `S` of hidden layers is this fraction of the prior covariance.
/// Starting hidden layers at the full prior buries the signal in sampling noise.
pub const HIDDEN_S_SCALE: f64 = 1e-5;
/// Initial `L_b` scale of hidden layers with the `B` parameterization.
pub const HIDDEN_B_SCALE: f64 = 10.0;
/// Default relative diagonal term on inducing Gram matrices.
pub const INDUCING_JITTER: f64 = 1e-6;
/// Test-time sample paths when none is given.
pub const DEFAULT_SAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Coupled,
    Decoupled,
}

impl FromStr for ModelKind {
    type Err = DgpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coupled" => Ok(ModelKind::Coupled),
            "decoupled" => Ok(ModelKind::Decoupled),
            _ => Err(DgpError::config(format!("unknown model kind `{s}` (coupled, decoupled)"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Coupled => "coupled",
            ModelKind::Decoupled => "decoupled",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variants {
    pub mean: MeanVariant,
    pub var: VarVariant,
}

/// Architecture of a model to initialize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Inducing points per layer (coupled).
    pub m: usize,
    /// Mean inducing points per layer (decoupled).
    pub m_a: usize,
    /// Variance inducing points per layer (decoupled).
    pub m_b: usize,
    /// Number of hidden layers; the model has `depth + 1` GP layers.
    pub depth: usize,
    pub width: usize,
    pub variants: Variants,
}

impl ModelConfig {
    pub fn coupled(m: usize, depth: usize, width: usize) -> Self {
        ModelConfig {
            kind: ModelKind::Coupled,
            m,
            m_a: 0,
            m_b: 0,
            depth,
            width,
            variants: Variants {
                mean: MeanVariant::GpCent,
                var: VarVariant::Gp,
            },
        }
    }

    pub fn decoupled(m_a: usize, m_b: usize, depth: usize, width: usize, mean: MeanVariant, var: VarVariant) -> Self {
        ModelConfig {
            kind: ModelKind::Decoupled,
            m: 0,
            m_a,
            m_b,
            depth,
            width,
            variants: Variants { mean, var },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth > 4 {
            return Err(DgpError::config(format!("depth {} outside 0..=4", self.depth)));
        }
        if self.width == 0 {
            return Err(DgpError::config("width must be positive"));
        }
        match self.kind {
            ModelKind::Coupled if self.m == 0 => Err(DgpError::config("coupled model needs M > 0")),
            ModelKind::Decoupled if self.m_a == 0 || self.m_b == 0 => Err(DgpError::config("decoupled model needs both M_a and M_b")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpModel {
    pub layers: Vec<LayerState>,
    pub mean_maps: Vec<StaticMeanMap>,
    pub log_noise_var: f64,
    pub hidden_width: usize,
    /// Fixed diagonal added to factorized inducing Gram matrices, relative
    /// to each layer's signal variance.
    pub inducing_jitter: f64,
    /// Parameterization of decoupled layers; `None` for coupled models.
    pub variants: Option<Variants>,
}

const INIT_STREAM: u64 = 0x1417;

/// `chol(K_ZZ + jitter * s2 * I)`, so that the initial `S` equals the prior.
fn prior_factor(z: &DMatrix<f64>, kernel: &KernelParams) -> Result<DMatrix<f64>> {
    let s2 = kernel.variance();
    let m = z.nrows();
    let k = kernel_matrix(z, z, kernel)? + DMatrix::identity(m, m) * (INDUCING_JITTER * s2);
    Ok(robust_cholesky(&k, &JitterPolicy::for_variance(s2))?.l)
}

impl DgpModel {
    /// Output layer starts at the prior, hidden layers with a much tighter
    /// `q(u)` (see `HIDDEN_S_SCALE`). Inducing inputs of layer `l` are a seeded
    /// subset of the training inputs pushed through the static mean maps of
    /// the layers below.
    pub fn init(cfg: &ModelConfig, x: &DMatrix<f64>, output_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if output_dim == 0 {
            return Err(DgpError::config("output dimension must be positive"));
        }
        let n_layers = cfg.depth + 1;
        let mut layers = Vec::with_capacity(n_layers);
        let mut mean_maps = Vec::with_capacity(n_layers);
        let mut h = x.clone();
        for l in 0..n_layers {
            let d_in = h.ncols();
            let d_out = if l + 1 == n_layers { output_dim } else { cfg.width };
            let kernel = KernelParams::unit(d_in);
            let layer_seed = derive_seed(seed, &[INIT_STREAM, l as u64]);
            let hidden = l + 1 < n_layers;
            let s_scale = if hidden { HIDDEN_S_SCALE.sqrt() } else { 1.0 };
            let layer = match cfg.kind {
                ModelKind::Coupled => {
                    let z = init_inducing(&h, cfg.m, layer_seed)?;
                    let l_s = prior_factor(&z, &kernel)? * s_scale;
                    LayerState::Coupled(CoupledLayerState::new(z, DMatrix::zeros(cfg.m, d_out), &l_s, kernel)?)
                }
                ModelKind::Decoupled => {
                    let pool = init_inducing(&h, cfg.m_a.max(cfg.m_b), layer_seed)?;
                    let z_a = pool.rows(0, cfg.m_a).into_owned();
                    let z_b = pool.rows(0, cfg.m_b).into_owned();
                    let l_b = match cfg.variants.var {
                        VarVariant::Gp => {
                            let scale = if hidden { HIDDEN_B_SCALE } else { INITIAL_B_SCALE };
                            DMatrix::identity(cfg.m_b, cfg.m_b) * scale
                        }
                        VarVariant::Cb => prior_factor(&z_b, &kernel)? * s_scale,
                    };
                    LayerState::Decoupled(DecoupledLayerState::new(z_a, z_b, DMatrix::zeros(cfg.m_a, d_out), &l_b, kernel)?)
                }
            };
            let map = StaticMeanMap::for_dims(d_in, d_out);
            h = &h * &map.weights;
            layers.push(layer);
            mean_maps.push(map);
        }
        let model = DgpModel {
            layers,
            mean_maps,
            log_noise_var: INITIAL_NOISE_VAR.ln(),
            hidden_width: cfg.width,
            inducing_jitter: INDUCING_JITTER,
            variants: match cfg.kind {
                ModelKind::Coupled => None,
                ModelKind::Decoupled => Some(cfg.variants),
            },
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.layers.len() != self.mean_maps.len() {
            return Err(DgpError::config("model needs one mean map per layer and at least one layer"));
        }
        let coupled = matches!(self.layers[0], LayerState::Coupled(_));
        for (l, (layer, map)) in self.layers.iter().zip(&self.mean_maps).enumerate() {
            layer.validate()?;
            if matches!(layer, LayerState::Coupled(_)) != coupled {
                return Err(DgpError::config("layers must all be coupled or all decoupled"));
            }
            if map.input_dim() != layer.input_dim() || map.output_dim() != layer.output_dim() {
                return Err(DgpError::config(format!("mean map of layer {l} does not match the layer shape")));
            }
            if let Some(next) = self.layers.get(l + 1) {
                if next.input_dim() != layer.output_dim() {
                    return Err(DgpError::config(format!("layer {l} output does not feed layer {}", l + 1)));
                }
                if layer.output_dim() != self.hidden_width {
                    return Err(DgpError::config(format!("hidden layer {l} is not {} wide", self.hidden_width)));
                }
            }
        }
        if !coupled && self.variants.is_none() {
            return Err(DgpError::config("decoupled model without variants"));
        }
        if !(self.inducing_jitter >= 0.0 && self.inducing_jitter.is_finite()) {
            return Err(DgpError::config("inducing jitter must be finite and non-negative"));
        }
        if !self.log_noise_var.is_finite() {
            return Err(DgpError::config("noise variance is not finite"));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn noise_var(&self) -> f64 {
        self.log_noise_var.exp()
    }

    pub fn kind(&self) -> ModelKind {
        match self.layers[0] {
            LayerState::Coupled(_) => ModelKind::Coupled,
            LayerState::Decoupled(_) => ModelKind::Decoupled,
        }
    }

    fn variant_pair(&self) -> Option<(MeanVariant, VarVariant)> {
        self.variants.map(|v| (v.mean, v.var))
    }

    /// Identifiers of the blocks the filter selects, in a fixed order.
    pub fn block_ids(&self, filter: &ParamFilter) -> Vec<BlockId> {
        let mut tape = Tape::new();
        let mut reg = Registrar::new(Some(filter));
        register(&mut tape, &mut reg, self).expect("validated model registers");
        reg.entries.into_iter().map(|(id, _)| id).collect()
    }

    /// Current value of a parameter block in its unconstrained form.
    pub fn get_block(&self, id: &BlockId) -> Result<DMatrix<f64>> {
        if id.kind == BlockKind::LogNoise {
            return Ok(DMatrix::from_element(1, 1, self.log_noise_var));
        }
        let layer = self.layer_of(id)?;
        let kernel = layer.kernel();
        Ok(match (layer, id.kind) {
            (_, BlockKind::LogLengthscales) => DMatrix::from_column_slice(kernel.dim(), 1, &kernel.log_lengthscales),
            (_, BlockKind::LogVariance) => DMatrix::from_element(1, 1, kernel.log_variance),
            (LayerState::Coupled(c), BlockKind::InducingMean) => c.inducing.clone(),
            (LayerState::Coupled(c), BlockKind::VariationalMean) => c.mean.clone(),
            (LayerState::Coupled(c), BlockKind::VariationalFactor) => c.factor_raw.clone(),
            (LayerState::Decoupled(d), BlockKind::InducingMean) => d.inducing_mean.clone(),
            (LayerState::Decoupled(d), BlockKind::InducingVar) => d.inducing_var.clone(),
            (LayerState::Decoupled(d), BlockKind::VariationalMean) => d.mean_param.clone(),
            (LayerState::Decoupled(d), BlockKind::VariationalFactor) => d.factor_raw.clone(),
            _ => return Err(DgpError::config(format!("no block {id}"))),
        })
    }

    /// Overwrite a parameter block. The shape must match.
    pub fn set_block(&mut self, id: &BlockId, value: &DMatrix<f64>) -> Result<()> {
        let current = self.get_block(id)?;
        if current.shape() != value.shape() {
            return Err(DgpError::config(format!(
                "block {id} is {:?}, got {:?}",
                current.shape(),
                value.shape()
            )));
        }
        if id.kind == BlockKind::LogNoise {
            self.log_noise_var = value[(0, 0)];
            return Ok(());
        }
        let l = id.layer.expect("checked by get_block");
        let layer = &mut self.layers[l];
        let kernel = match layer {
            LayerState::Coupled(c) => &mut c.kernel,
            LayerState::Decoupled(d) => &mut d.kernel,
        };
        match id.kind {
            BlockKind::LogLengthscales => kernel.log_lengthscales.copy_from_slice(value.as_slice()),
            BlockKind::LogVariance => kernel.log_variance = value[(0, 0)],
            _ => {
                let target = match (layer, id.kind) {
                    (LayerState::Coupled(c), BlockKind::InducingMean) => &mut c.inducing,
                    (LayerState::Coupled(c), BlockKind::VariationalMean) => &mut c.mean,
                    (LayerState::Coupled(c), BlockKind::VariationalFactor) => &mut c.factor_raw,
                    (LayerState::Decoupled(d), BlockKind::InducingMean) => &mut d.inducing_mean,
                    (LayerState::Decoupled(d), BlockKind::InducingVar) => &mut d.inducing_var,
                    (LayerState::Decoupled(d), BlockKind::VariationalMean) => &mut d.mean_param,
                    (LayerState::Decoupled(d), BlockKind::VariationalFactor) => &mut d.factor_raw,
                    _ => unreachable!("rejected by get_block"),
                };
                target.copy_from(value);
            }
        }
        Ok(())
    }

    fn layer_of(&self, id: &BlockId) -> Result<&LayerState> {
        id.layer
            .and_then(|l| self.layers.get(l))
            .ok_or_else(|| DgpError::config(format!("no block {id}")))
    }

    /// Draw `samples` independent paths through the hidden layers. Path `s`
    /// uses noise streams derived from `(seed, s, layer)`.
    pub fn forward_sample(&self, x: &DMatrix<f64>, seed: u64, samples: usize) -> Result<PredictiveSamples> {
        if samples == 0 {
            return Err(DgpError::config("need at least one sample path"));
        }
        if x.ncols() != self.input_dim() {
            return Err(DgpError::config(format!(
                "inputs have {} columns but the model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut tape = Tape::new();
        let mut reg = Registrar::new(None);
        let vars = register(&mut tape, &mut reg, self)?;
        let preps = vars
            .layers
            .iter()
            .map(|v| prepare(&mut tape, v, self.inducing_jitter))
            .collect::<Result<Vec<_>>>()?;
        let h0 = tape.constant(x.clone());
        let first = layer_output(&mut tape, &preps[0], &self.mean_maps[0], h0)?;
        let mark = tape.len();
        let mut out = PredictiveSamples {
            means: Vec::with_capacity(samples),
            vars: Vec::with_capacity(samples),
        };
        for s in 0..samples {
            let (mut mean, mut var) = first;
            for (l, (prep, map)) in preps.iter().zip(&self.mean_maps).enumerate().skip(1) {
                let noise = standard_normal_matrix(&mut rng_from(seed, &[s as u64, l as u64 - 1]), x.nrows(), tape.shape(mean).1);
                let h = sample_on_tape(&mut tape, mean, var, noise)?;
                (mean, var) = layer_output(&mut tape, prep, map, h)?;
            }
            out.means.push(tape.value(mean).clone());
            out.vars.push(DVector::from_column_slice(tape.value(var).as_slice()));
            tape.truncate(mark);
        }
        Ok(out)
    }

    /// Mean test log-likelihood and RMSE in original target units.
    pub fn evaluate(
        &self,
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
        samples: usize,
        seed: u64,
        normalizer: Option<&Normalizer>,
    ) -> Result<TestMetrics> {
        let (xn, yn) = match normalizer {
            Some(n) => (n.x.apply(x)?, n.y.apply(y)?),
            None => (x.clone(), y.clone()),
        };
        let pred = self.forward_sample(&xn, seed, samples)?;
        let shift = normalizer.map_or(0.0, Normalizer::log_y_scale);
        let mean_ll = mixture_log_likelihood(&pred, &yn, self.noise_var())? - shift;
        let point = pred.point_prediction();
        let point = match normalizer {
            Some(n) => n.y.invert(&point)?,
            None => point,
        };
        Ok(TestMetrics {
            mean_ll,
            rmse: rmse(&point, y)?,
        })
    }

    pub fn test_log_likelihood(
        &self,
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
        samples: usize,
        seed: u64,
        normalizer: Option<&Normalizer>,
    ) -> Result<f64> {
        Ok(self.evaluate(x, y, samples, seed, normalizer)?.mean_ll)
    }

    pub fn rmse(&self, x: &DMatrix<f64>, y: &DMatrix<f64>, samples: usize, seed: u64, normalizer: Option<&Normalizer>) -> Result<f64> {
        Ok(self.evaluate(x, y, samples, seed, normalizer)?.rmse)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub mean_ll: f64,
    pub rmse: f64,
}

/// Per-path final-layer marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSamples {
    /// `S` matrices of shape `n x d_y`.
    pub means: Vec<DMatrix<f64>>,
    /// `S` vectors of length `n`.
    pub vars: Vec<DVector<f64>>,
}

impl PredictiveSamples {
    pub fn num_samples(&self) -> usize {
        self.means.len()
    }

    /// Average of the per-path means.
    pub fn point_prediction(&self) -> DMatrix<f64> {
        let mut acc = self.means[0].clone();
        for m in &self.means[1..] {
            acc += m;
        }
        acc / self.means.len() as f64
    }
}

/// Mean over points of `log (1/S) sum_s N(y | mean_s, var_s + noise_var)`,
/// with independent output columns sharing the per-point variance.
pub fn mixture_log_likelihood(pred: &PredictiveSamples, y: &DMatrix<f64>, noise_var: f64) -> Result<f64> {
    let s = pred.num_samples();
    if s == 0 || pred.means.iter().any(|m| m.shape() != y.shape()) || pred.vars.iter().any(|v| v.len() != y.nrows()) {
        return Err(DgpError::config("predictive samples do not match targets"));
    }
    let (n, d) = y.shape();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    let mut terms = vec![0.0; s];
    for i in 0..n {
        for (k, t) in terms.iter_mut().enumerate() {
            let v = pred.vars[k][i] + noise_var;
            let mut lp = 0.0;
            for j in 0..d {
                let r = y[(i, j)] - pred.means[k][(i, j)];
                lp += -0.5 * (ln2pi + v.ln()) - r * r / (2.0 * v);
            }
            *t = lp;
        }
        let mx = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln();
        total += lse - (s as f64).ln();
    }
    Ok(total / n as f64)
}

pub fn rmse(pred: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if pred.shape() != y.shape() || y.is_empty() {
        return Err(DgpError::config("prediction and target shapes differ"));
    }
    Ok(((pred - y).norm_squared() / y.len() as f64).sqrt())
}

// ---------------------------------------------------------------------------
// Tape plumbing shared with the objective

pub(crate) struct ModelVars {
    pub layers: Vec<LayerVars>,
    pub log_noise: Var,
}

pub(crate) fn register(tape: &mut Tape, reg: &mut Registrar<'_>, model: &DgpModel) -> Result<ModelVars> {
    model.validate()?;
    let variants = model.variant_pair();
    let layers = model
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| reg.layer(tape, l, layer, variants))
        .collect::<Result<Vec<_>>>()?;
    let log_noise = reg.param(
        tape,
        None,
        BlockKind::LogNoise,
        "log_noise_var",
        DMatrix::from_element(1, 1, model.log_noise_var),
    );
    Ok(ModelVars { layers, log_noise })
}

/// Layer marginals with the static mean added.
pub(crate) fn layer_output(tape: &mut Tape, prep: &PreparedLayer, map: &StaticMeanMap, h: Var) -> Result<(Var, Var)> {
    let (mean, var) = predict_on_tape(tape, prep, h)?;
    let mean = static_mean_on_tape(tape, h, map, mean)?;
    Ok((mean, var))
}

// ---------------------------------------------------------------------------
// Serialization

/// Versioned, self-describing model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format: String,
    pub version: u32,
    pub model: DgpModel,
    pub normalizer: Option<Normalizer>,
}

impl ModelDocument {
    pub fn new(model: DgpModel, normalizer: Option<Normalizer>) -> Self {
        ModelDocument {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            model,
            normalizer,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
        }
        let h: Header = serde_json::from_str(text)?;
        if h.format != MODEL_FORMAT {
            return Err(DgpError::Serialization(format!("not a model document (format `{}`)", h.format)));
        }
        if h.version != MODEL_VERSION {
            return Err(DgpError::Serialization(format!(
                "model document version {} is not supported (expected {MODEL_VERSION})",
                h.version
            )));
        }
        let doc: ModelDocument = serde_json::from_str(text)?;
        doc.model.validate()?;
        Ok(doc)
    }
}
