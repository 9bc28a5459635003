//! Transformer assemblies built from the attention operators, and their
//! analytical costs.

pub mod config;
pub mod cost;
mod network;

pub use config::{AttentionKind, Family, ModelConfig, PRESET_NAMES};
pub use cost::{count_flops, count_params, CostReport, FLOP_CONVENTION};
pub use network::{
    Attention, Block, BlockCache, Embedding, ForwardCache, Gradients, Input, Mlp, Model, ParamKind, TokenBatch,
};
