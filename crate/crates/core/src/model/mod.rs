//! Tiny pre-norm decoder-only transformer over a system / image / instruction
//! token layout.

mod config;
mod forward;
mod infer;
mod params;
mod train;

pub use config::{ModelConfig, Segment, TokenId, TokenLayout};
pub use forward::{forward, AttentionDelta, ForwardOptions, ForwardTrace, LossTarget, StageRecord};
pub use infer::{argmax, generate, generate_with_cache, predict, top_k, KvCache, Prediction};
pub use params::{build_model, LayerParams, ModelParams};
pub use train::{train, TrainReport, TrainSpec};


