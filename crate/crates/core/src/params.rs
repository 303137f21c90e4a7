use std::fmt;

use serde::{Deserialize, Serialize};

/// What a trainable parameter block represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// `Z` (coupled) or `Z_a` (decoupled).
    InducingMean,
    /// `Z_b` (decoupled only).
    InducingVar,
    /// `m`, `a` or `m'` depending on the parameterization.
    VariationalMean,
    /// Unconstrained `L_s` / `L_b`: strict lower triangle plus log-diagonal.
    VariationalFactor,
    LogLengthscales,
    LogVariance,
    LogNoise,
}

impl BlockKind {
    pub fn group(self) -> BlockGroup {
        match self {
            BlockKind::InducingMean | BlockKind::InducingVar => BlockGroup::Inducing,
            BlockKind::VariationalMean | BlockKind::VariationalFactor => BlockGroup::Variational,
            BlockKind::LogLengthscales | BlockKind::LogVariance => BlockGroup::Kernel,
            BlockKind::LogNoise => BlockGroup::Likelihood,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockGroup {
    Inducing,
    Variational,
    Kernel,
    Likelihood,
}

/// A parameter block: its kind, owning layer (none for the likelihood) and a display name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockId {
    pub layer: Option<usize>,
    pub kind: BlockKind,
    pub name: String,
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "layer{l}.{}", self.name),
            None => write!(f, "{}", self.name),
        }
    }
}

/// Which parameter groups receive gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamFilter {
    pub inducing: bool,
    pub variational: bool,
    pub kernel: bool,
    pub likelihood: bool,
}

impl ParamFilter {
    pub const ALL: ParamFilter = ParamFilter {
        inducing: true,
        variational: true,
        kernel: true,
        likelihood: true,
    };

    pub const VARIATIONAL_ONLY: ParamFilter = ParamFilter {
        inducing: false,
        variational: true,
        kernel: false,
        likelihood: false,
    };

    pub fn allows(&self, kind: BlockKind) -> bool {
        match kind.group() {
            BlockGroup::Inducing => self.inducing,
            BlockGroup::Variational => self.variational,
            BlockGroup::Kernel => self.kernel,
            BlockGroup::Likelihood => self.likelihood,
        }
    }
}

impl Default for ParamFilter {
    fn default() -> Self {
        ParamFilter::ALL
    }
}
