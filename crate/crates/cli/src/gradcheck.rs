//! Finite-difference verification of ELBO gradients on a small model.

use dgp_core::data::Normalizer;
use dgp_core::oracle::{gradcheck as oracle_check, perturb_parameters, BlockCheck, FiniteDiffSpec};
use dgp_core::rng::{permutation, rng_from};
use dgp_core::{DgpModel, ModelConfig, ModelKind, ParamFilter};
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetRef;
use crate::error::{CliError, CliResult, FailureKind};
use crate::experiment::describe_model;
use crate::format::{sig6, Table};

pub const GRADCHECK_FORMAT: &str = "dgp-gradcheck";
pub const GRADCHECK_VERSION: u32 = 1;
pub const MAX_INDUCING: usize = 16;
pub const MAX_POINTS: usize = 32;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_PERTURBATION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSpec {
    pub dataset: DatasetRef,
    pub model: ModelConfig,
    /// Rows drawn from the dataset.
    pub n: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub h0: f64,
    /// Scale of the seeded parameter perturbation applied after initialization.
    pub perturbation: f64,
}

impl GradcheckSpec {
    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        let m = &self.model;
        let biggest = match m.kind {
            ModelKind::Coupled => m.m,
            ModelKind::Decoupled => m.m_a.max(m.m_b),
        };
        if biggest > MAX_INDUCING {
            return Err(CliError::config(format!("gradcheck allows at most {MAX_INDUCING} inducing points per set, got {biggest}")));
        }
        if self.n == 0 || self.n > MAX_POINTS {
            return Err(CliError::config(format!("gradcheck uses 1..={MAX_POINTS} data points, got {}", self.n)));
        }
        if !(self.tolerance >= 0.0) || !(self.h0 > 0.0) || !(self.perturbation >= 0.0) {
            return Err(CliError::config("tolerance and perturbation must be non-negative and the step positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub format: String,
    pub version: u32,
    pub spec: GradcheckSpec,
    pub elbo: f64,
    pub blocks: Vec<BlockCheck>,
    pub worst_block: String,
    pub worst_rel_error: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn render(&self) -> String {
        let mut t = Table::new(["block", "coords", "rel error", "max abs error", "|grad|", "ok"]);
        for b in &self.blocks {
            t.push(vec![
                b.block.clone(),
                b.coordinates.to_string(),
                sig6(b.rel_error),
                sig6(b.max_abs_error),
                sig6(b.gradient_norm),
                if b.rel_error < self.spec.tolerance { "yes" } else { "NO" }.into(),
            ]);
        }
        format!(
            "{} on {} (n={})  ELBO {}\n\n{}{}: worst {} in {} (tolerance {})\n",
            describe_model(&self.spec.model),
            self.spec.dataset.name,
            self.spec.n,
            sig6(self.elbo),
            t.render(),
            if self.passed { "PASS" } else { "FAIL" },
            sig6(self.worst_rel_error),
            self.worst_block,
            sig6(self.spec.tolerance)
        )
    }

    pub fn failure(&self) -> Option<CliError> {
        (!self.passed).then(|| {
            CliError::new(
                FailureKind::Verification,
                format!(
                    "gradient check failed: {} has relative error {:e} (tolerance {:e})",
                    self.worst_block, self.worst_rel_error, self.spec.tolerance
                ),
            )
        })
    }
}

const GRADCHECK_STREAM: u64 = 0x6C;

/// A block passes when its relative error is strictly below the tolerance.
pub fn gradcheck(spec: &GradcheckSpec) -> CliResult<GradcheckReport> {
    spec.validate()?;
    let data = spec.dataset.load()?;
    if spec.n > data.len() {
        return Err(CliError::config(format!("dataset has only {} rows", data.len())));
    }
    let rows = permutation(&mut rng_from(spec.seed, &[GRADCHECK_STREAM, 0]), data.len());
    let subset = data.select(&rows[..spec.n]);
    let subset = Normalizer::fit(&subset).apply(&subset)?;
    let mut model = DgpModel::init(&spec.model, &subset.x, subset.y.ncols(), spec.seed)?;
    perturb_parameters(&mut model, &ParamFilter::ALL, spec.seed, spec.perturbation)?;
    let noise_seed = dgp_core::rng::derive_seed(spec.seed, &[GRADCHECK_STREAM, 1]);
    let elbo = dgp_core::objective::elbo(&model, &subset.x, &subset.y, spec.n, noise_seed)?.total;
    let blocks = oracle_check(
        &model,
        &subset.x,
        &subset.y,
        spec.n,
        noise_seed,
        &ParamFilter::ALL,
        &FiniteDiffSpec { h0: spec.h0 },
    )?;
    let worst = blocks
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .ok_or_else(|| CliError::config("model has no trainable blocks"))?;
    Ok(GradcheckReport {
        format: GRADCHECK_FORMAT.into(),
        version: GRADCHECK_VERSION,
        spec: spec.clone(),
        elbo,
        worst_block: worst.block.clone(),
        worst_rel_error: worst.rel_error,
        passed: blocks.iter().all(|b| b.rel_error < spec.tolerance),
        blocks,
    })
}
