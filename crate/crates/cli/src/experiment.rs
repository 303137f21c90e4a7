//! What to run: dataset, architecture, optimizer settings and repeat protocol.

use dgp_core::rng::derive_seed;
use dgp_core::{ModelConfig, ModelKind, SplitSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetRef;
use crate::error::{CliError, CliResult};

pub const DEFAULT_REPEATS: usize = 5;
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;
pub const DEFAULT_WIDTH: usize = 10;
pub const DEFAULT_DEPTH: usize = 1;
pub const DEFAULT_M: usize = 200;
pub const DEFAULT_M_A: usize = 500;
pub const DEFAULT_M_B: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub dataset: DatasetRef,
    pub model: ModelConfig,
    /// Its `seed` is replaced per repeat by [`RepeatSeeds::train`].
    pub train: TrainConfig,
    pub repeats: usize,
    pub seed: u64,
    /// Test-time sample paths.
    pub samples: usize,
    pub test_fraction: f64,
}

/// Every seed one repeat uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepeatSeeds {
    pub split: u64,
    pub init: u64,
    pub train: u64,
    pub eval: u64,
}

const REPEAT_STREAM: u64 = 0x4E9;

impl ExperimentSpec {
    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.repeats == 0 {
            return Err(CliError::config("repeats must be at least 1"));
        }
        if self.samples == 0 {
            return Err(CliError::config("samples must be at least 1"));
        }
        SplitSpec::new(self.test_fraction, 0, self.seed)?;
        Ok(())
    }

    /// The split uses the experiment seed with the repeat as its index, so
    /// repeats see different test sets; the rest are derived per repeat.
    pub fn seeds(&self, repeat: usize) -> RepeatSeeds {
        let r = repeat as u64;
        RepeatSeeds {
            split: self.seed,
            init: derive_seed(self.seed, &[REPEAT_STREAM, r, 0]),
            train: derive_seed(self.seed, &[REPEAT_STREAM, r, 1]),
            eval: derive_seed(self.seed, &[REPEAT_STREAM, r, 2]),
        }
    }

    pub fn split(&self, repeat: usize) -> CliResult<SplitSpec> {
        Ok(SplitSpec::new(self.test_fraction, repeat as u64, self.seeds(repeat).split)?)
    }

    pub fn train_config(&self, repeat: usize) -> TrainConfig {
        TrainConfig {
            seed: self.seeds(repeat).train,
            ..self.train.clone()
        }
    }

    /// One-line architecture summary.
    pub fn describe_model(&self) -> String {
        describe_model(&self.model)
    }
}

pub fn describe_model(m: &ModelConfig) -> String {
    match m.kind {
        ModelKind::Coupled => format!("coupled M={} depth={} width={}", m.m, m.depth, m.width),
        ModelKind::Decoupled => format!(
            "decoupled Ma={} Mb={} mean={} var={} depth={} width={}",
            m.m_a, m.m_b, m.variants.mean, m.variants.var, m.depth, m.width
        ),
    }
}
