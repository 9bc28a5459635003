//! Desk-scale training: optimizer, losses, synthetic tasks and the loop.

pub mod loss;
pub mod optim;
pub mod tasks;
pub mod trainer;

pub use loss::{bits_per_byte, cross_entropy, LossOutput};
pub use optim::{adamw_step, AdamWConfig, OptimizerState, StepInfo};
pub use tasks::{
    byte_windows, gen_bars, gen_cluster_regression, gen_copy_lm, gen_copy_sequences, BarsSpec, ClusterData,
    ClusterSpec, CopyBatch, CopySpec,
};
pub use trainer::{
    byte_lm_eval, cluster_layer, cluster_loss, fmt_sig, train_cluster_sigma, train_loop, ByteEval, MetricRow,
    MetricsTrace, TaskSpec, TrainConfig,
};
