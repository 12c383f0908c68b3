//! Activation-guided layer-wise task-vector sparsity for model merging.
//!
//! This crate holds the pure algorithmic pieces: checkpoint and task-vector
//! types, the pruning functions, TIES/DARE merge methods, the layer
//! importance planner, and a small decoder-only transformer used to capture
//! activation profiles. It performs no IO and only needs `alloc`; the
//! companion `lewis` crate carries the file formats and the CLI.
//!
//! The pipeline is:
//!
//! 1. [`runtime::profile_model`] runs a calibration set through the base and
//!    each fine-tuned model and records the mean activation norm per block.
//! 2. [`importance::build_plan_lewis`] turns the per-block norm deviations
//!    into keep-densities clipped to `[gamma, epsilon]`.
//! 3. [`merge::merge`] prunes every task vector at its planned densities and
//!    combines them into a merged checkpoint.

#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod error;
pub mod importance;
pub mod merge;
pub mod pruning;
pub mod rng;
pub mod roles;
pub mod runtime;
pub mod task_vector;
pub mod tensor;

pub use error::{Error, Result};
pub use importance::{ActivationProfile, ImportanceScores, PlanMode, SparsityBounds, SparsityPlan};
pub use merge::{MergeMethod, MergeOptions};
pub use pruning::PruneMode;
pub use roles::{NamingScheme, RoleKind, TensorRole};
pub use runtime::{ArchConfig, CalibrationSet, NormConvention};
pub use task_vector::{Delta, MergeRecipe, PlanRefs, TaskVector};
pub use tensor::{Checkpoint, DType, Tensor};
