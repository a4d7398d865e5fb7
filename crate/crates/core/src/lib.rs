//! Continual learning with additive parameter decomposition.
//!
//! Every layer's weights for task `t` are `shared * mask_t + tau_t`, where the
//! shared weights are common to all tasks, the mask is a learned per-column
//! gate and `tau_t` is a sparse task-adaptive delta. Earlier tasks are kept
//! intact by penalising drift of their composed weights, and related tasks
//! periodically pool common delta values into locally-shared weights.

pub mod consolidation;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod network;
pub mod numeric;
pub mod objective;
pub mod parallel;
pub mod params;
pub mod taskgen;
pub mod trainer;

pub use error::{ApdError, Result};
pub use numeric::{Activation, Matrix};
pub use params::{Architecture, DecomposedState, Dense, GroupId, TaskId, TauInit};
pub use taskgen::{StreamSpec, TaskDataset};
pub use trainer::{run_sequence, HyperParams, SequenceRunner, Variant, VariantKind};
