//! Doubly stochastic variational inference for deep Gaussian processes with
//! decoupled inducing inputs: a large inducing set for the predictive mean,
//! a smaller one for the predictive variance.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod autodiff;
pub mod data;
pub mod dense;
pub mod error;
pub mod kernel;
pub mod layer;
pub mod model;
pub mod objective;
pub mod oracle;
pub mod params;
pub mod rng;
mod serde_matrix;
pub mod train;

pub use error::{DgpError, Result};
pub use kernel::{JitterPolicy, KernelParams};
pub use data::{Dataset, DatasetSource, Manifest, Normalizer, SplitSpec};
pub use layer::{MeanVariant, VarVariant};
pub use model::{DgpModel, ModelConfig, ModelDocument, ModelKind, TestMetrics, Variants};
pub use params::{BlockId, ParamFilter};
pub use train::{AdamState, Checkpoint, TrainConfig, TrainHistory, Trainer};
