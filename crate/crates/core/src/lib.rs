//! Semantically stealthy adversarial attacks on segmentation networks.
//!
//! A perturbation generator with a shared-backbone segmentation regularizer
//! is trained against a frozen target model so that chosen labels vanish,
//! appear, or move while every other pixel keeps its clean prediction.
//!
//! - [`tensor`]: tensors, reverse-mode autodiff, optimizers, gradient checks
//! - [`nets`]: the target FCN, the dual-head generator UNet, checkpoints
//! - [`scenes`]: procedural street scenes and dataset files
//! - [`attack`]: label mappers, losses, perturbation bounding, training
//! - [`eval`]: success metrics, experiment grids, reports, rendering

pub mod attack;
pub mod error;
pub mod eval;
pub mod labels;
pub mod nets;
pub mod scenes;
pub mod tensor;
pub mod util;

pub use attack::{AttackSpec, AttackTrainConfig, AttackType, StealthyLabels, SuccessMode, TargetMask};
pub use error::{Error, Result};
pub use eval::MetricsReport;
pub use labels::{ClassId, LabelMap};
pub use nets::{GeneratorOutput, Model, ModelConfig, ModelKind};
pub use scenes::{SampleSet, SceneConfig, Style};
pub use tensor::{Graph, Optimizer, OptimizerKind, Real, Tensor, Var};
