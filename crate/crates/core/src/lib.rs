//! Visual-information-flow laboratory for a tiny multimodal decoder.
//!
//! The crate is `no_std` (it needs `alloc`) and holds everything that is pure
//! computation:
//!
//! * [`numerics`]: dense `f64` matrices, a reverse-mode tape and a
//!   finite-difference checker.
//! * [`model`]: a pre-norm decoder-only transformer over a
//!   system / image / instruction token layout, with attention capture,
//!   attention interventions, mid-stack image-token pruning, Adam training and
//!   greedy KV-cached generation.
//! * [`saliency`]: the attention saliency matrix and the modality / visual
//!   flow scores derived from it.
//! * [`perturb`]: attention-flow blocking and the consistency / bias metrics.
//! * [`prune`]: hierarchical modality-aware pruning criteria and schedules.
//! * [`cost`]: the analytical FLOPs model and reduction rate.
//! * [`task`]: the synthetic "colour at grid position" task.
//!
//! File formats, the CLI and experiment orchestration live in the `himap`
//! companion crate.

#![no_std]
#![warn(missing_debug_implementations)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod cost;
mod error;
pub mod model;
pub mod numerics;
pub mod perturb;
pub mod prune;
mod rng;
pub mod saliency;
pub mod task;

pub use error::{Error, Result};
pub use model::{
    forward, generate, train, ForwardOptions, ForwardTrace, LossTarget, ModelConfig, ModelParams,
    TokenId, TokenLayout, TrainReport, TrainSpec,
};
pub use numerics::Matrix;
pub use perturb::{Intervention, InterventionKind};
pub use prune::{Criterion, PruneSchedule, PruneStage};
pub use task::{SyntheticExample, SyntheticTaskSpec};
