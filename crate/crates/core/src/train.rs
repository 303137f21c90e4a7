//! Adam ascent on the ELBO with seeded minibatching and resumable checkpoints.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{DgpError, Result};
use crate::layer::Registrar;
use crate::model::{register, DgpModel, ModelDocument};
use crate::objective::{build_elbo, read_estimate, ElboEstimate};
use crate::params::{BlockId, ParamFilter};
use crate::rng::{derive_seed, permutation, rng_from};

pub const CHECKPOINT_FORMAT: &str = "dgp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MAX_BATCH: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `None` means `min(N, 10000)`.
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub trainable: ParamFilter,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5000,
            batch_size: None,
            learning_rate: 0.01,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            trainable: ParamFilter::ALL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(DgpError::config("learning rate must be a finite non-negative number"));
        }
        for (name, b) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(DgpError::config(format!("adam {name} must lie in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(DgpError::config("adam eps must be positive"));
        }
        if self.batch_size == Some(0) {
            return Err(DgpError::config("batch size must be positive"));
        }
        Ok(())
    }

    pub fn batch_for(&self, n: usize) -> usize {
        self.batch_size.unwrap_or(MAX_BATCH).min(n).max(1)
    }
}

/// Adam moment estimates, one pair per parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub blocks: Vec<BlockId>,
    #[serde(with = "crate::serde_matrix::vec")]
    pub first: Vec<DMatrix<f64>>,
    #[serde(with = "crate::serde_matrix::vec")]
    pub second: Vec<DMatrix<f64>>,
}

impl AdamState {
    pub fn new(blocks: &[(BlockId, DMatrix<f64>)]) -> Self {
        AdamState {
            step: 0,
            blocks: blocks.iter().map(|(id, _)| id.clone()).collect(),
            first: blocks.iter().map(|(_, v)| DMatrix::zeros(v.nrows(), v.ncols())).collect(),
            second: blocks.iter().map(|(_, v)| DMatrix::zeros(v.nrows(), v.ncols())).collect(),
        }
    }

    pub fn for_model(model: &DgpModel, filter: &ParamFilter) -> Result<Self> {
        let blocks = model
            .block_ids(filter)
            .into_iter()
            .map(|id| model.get_block(&id).map(|v| (id, v)))
            .collect::<Result<Vec<_>>>()?;
        Ok(AdamState::new(&blocks))
    }
}

/// One ascent step `theta += lr * m_hat / (sqrt(v_hat) + eps)` over every block.
pub fn adam_step(params: &mut [DMatrix<f64>], grads: &[(BlockId, DMatrix<f64>)], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || grads.len() != state.blocks.len() {
        return Err(DgpError::config("adam: parameter, gradient and state block counts differ"));
    }
    for (k, (id, g)) in grads.iter().enumerate() {
        if *id != state.blocks[k] || params[k].shape() != g.shape() || state.first[k].shape() != g.shape() {
            return Err(DgpError::config(format!("adam: block {id} does not match the optimizer state")));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(DgpError::Training {
                block: id.to_string(),
                message: format!("non-finite gradient at entry {i}"),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (k, (_, g)) in grads.iter().enumerate() {
        let m = &mut state.first[k];
        let v = &mut state.second[k];
        let p = &mut params[k];
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] += cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Gradient blocks in registration order.
pub type BlockGradients = Vec<(BlockId, DMatrix<f64>)>;

/// ELBO and its exact gradient (at the fixed sample path of `seed`) for every block the filter selects.
pub fn elbo_gradients(
    model: &DgpModel,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    full_size: usize,
    seed: u64,
    filter: &ParamFilter,
) -> Result<(ElboEstimate, BlockGradients)> {
    let mut tape = Tape::new();
    let mut reg = Registrar::new(Some(filter));
    let vars = register(&mut tape, &mut reg, model)?;
    let e = build_elbo(&mut tape, model, &vars, x, y, full_size, seed)?;
    let est = read_estimate(&tape, &e);
    if !est.total.is_finite() {
        return Err(DgpError::Training {
            block: "elbo".into(),
            message: format!("non-finite objective {}", est.total),
        });
    }
    let grads = tape.backward(e.total);
    let out = reg
        .entries
        .into_iter()
        .map(|(id, v)| {
            let g = grads.get_or_zeros(&tape, v);
            (id, g)
        })
        .collect();
    Ok((est, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean minibatch ELBO estimate per epoch.
    pub elbo: Vec<f64>,
    /// Seconds since the start of the run at the end of each epoch. Not
    /// stored in checkpoints.
    #[serde(default)]
    pub wall_clock: Vec<f64>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.elbo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elbo.is_empty()
    }
}

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub epochs_completed: usize,
    pub model: ModelDocument,
    pub adam: AdamState,
    pub elbo_history: Vec<f64>,
}

impl Checkpoint {
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
        if h.format != CHECKPOINT_FORMAT || h.version != CHECKPOINT_VERSION {
            return Err(DgpError::Serialization(format!(
                "unsupported checkpoint `{}` version {} (expected `{CHECKPOINT_FORMAT}` version {CHECKPOINT_VERSION})",
                h.format, h.version
            )));
        }
        let ck: Checkpoint = serde_json::from_str(text)?;
        ck.model.model.validate()?;
        Ok(ck)
    }
}

/// A failed run: the error and, once training had started, the state after
/// the last completed epoch.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: DgpError,
    pub checkpoint: Option<Box<Checkpoint>>,
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.checkpoint {
            Some(c) => write!(f, "training aborted after {} epochs: {}", c.epochs_completed, self.error),
            None => write!(f, "training not started: {}", self.error),
        }
    }
}

impl std::error::Error for TrainAbort {}

const EPOCH_STREAM: u64 = 0xE90C;

/// Owns a model and its optimizer state for the duration of a run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: DgpModel,
    pub normalizer: Option<crate::data::Normalizer>,
    pub config: TrainConfig,
    pub adam: AdamState,
    pub epochs_completed: usize,
    pub history: TrainHistory,
}

impl Trainer {
    pub fn new(model: DgpModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        let adam = AdamState::for_model(&model, &config.trainable)?;
        Ok(Trainer {
            model,
            normalizer: None,
            config,
            adam,
            epochs_completed: 0,
            history: TrainHistory {
                elbo: Vec::new(),
                wall_clock: Vec::new(),
            },
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.config.validate()?;
        let expected = ck.model.model.block_ids(&ck.config.trainable);
        if expected != ck.adam.blocks {
            return Err(DgpError::Serialization("checkpoint optimizer state does not match its model".into()));
        }
        Ok(Trainer {
            model: ck.model.model,
            normalizer: ck.model.normalizer,
            config: ck.config,
            adam: ck.adam,
            epochs_completed: ck.epochs_completed,
            history: TrainHistory {
                elbo: ck.elbo_history,
                wall_clock: Vec::new(),
            },
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            epochs_completed: self.epochs_completed,
            model: ModelDocument::new(self.model.clone(), self.normalizer.clone()),
            adam: self.adam.clone(),
            elbo_history: self.history.elbo.clone(),
        }
    }

    /// Step seed for `(epoch, batch)`; also used as the reparameterization noise seed.
    pub fn step_seed(&self, epoch: usize, batch: usize) -> u64 {
        derive_seed(self.config.seed, &[EPOCH_STREAM, epoch as u64, batch as u64])
    }

    fn run_epoch(&mut self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
        let n = x.nrows();
        let epoch = self.epochs_completed;
        let batch = self.config.batch_for(n);
        let order = permutation(&mut rng_from(self.config.seed, &[EPOCH_STREAM, epoch as u64]), n);
        let mut model = self.model.clone();
        let mut adam = self.adam.clone();
        let mut sum = 0.0;
        let mut count = 0;
        for (b, rows) in order.chunks(batch).enumerate() {
            let (xb, yb) = if rows.len() == n && batch == n {
                (x.clone(), y.clone())
            } else {
                (x.select_rows(rows), y.select_rows(rows))
            };
            let (est, grads) = elbo_gradients(&model, &xb, &yb, n, self.step_seed(epoch, b), &self.config.trainable)?;
            let mut params: Vec<DMatrix<f64>> = grads.iter().map(|(id, _)| model.get_block(id)).collect::<Result<_>>()?;
            adam_step(&mut params, &grads, &mut adam, &self.config)?;
            for ((id, _), p) in grads.iter().zip(&params) {
                if let Some(i) = p.iter().position(|v| !v.is_finite()) {
                    return Err(DgpError::Training {
                        block: id.to_string(),
                        message: format!("parameter entry {i} became non-finite"),
                    });
                }
                model.set_block(id, p)?;
            }
            sum += est.total;
            count += 1;
        }
        self.model = model;
        self.adam = adam;
        self.epochs_completed += 1;
        Ok(sum / count as f64)
    }

    /// Run until `config.epochs` epochs are complete. On failure the model
    /// and optimizer are left at the last completed epoch.
    pub fn run(&mut self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(), TrainAbort> {
        self.run_until(x, y, self.config.epochs)
    }

    /// Run until `target` epochs in total are complete (capped at `config.epochs`).
    pub fn run_until(&mut self, x: &DMatrix<f64>, y: &DMatrix<f64>, target: usize) -> Result<(), TrainAbort> {
        let abort = |t: &Trainer, error| TrainAbort {
            error,
            checkpoint: Some(Box::new(t.checkpoint())),
        };
        if x.nrows() == 0 || x.nrows() != y.nrows() {
            return Err(abort(self, DgpError::config("training data is empty or misaligned")));
        }
        let start = Instant::now();
        let target = target.min(self.config.epochs);
        while self.epochs_completed < target {
            match self.run_epoch(x, y) {
                Ok(e) => {
                    self.history.elbo.push(e);
                    self.history.wall_clock.push(start.elapsed().as_secs_f64());
                }
                Err(e) => return Err(abort(self, e)),
            }
        }
        Ok(())
    }
}

/// Train a fresh copy of `model` on normalized data.
pub fn train(model: DgpModel, x: &DMatrix<f64>, y: &DMatrix<f64>, cfg: &TrainConfig) -> Result<(DgpModel, TrainHistory), TrainAbort> {
    let mut t = Trainer::new(model, cfg.clone()).map_err(|error| TrainAbort { error, checkpoint: None })?;
    t.run(x, y)?;
    Ok((t.model, t.history))
}
