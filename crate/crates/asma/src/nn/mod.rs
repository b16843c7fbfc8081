//! Model components: ST-GCN encoders, Barlow Twins projector and losses,
//! cross-attention feature alignment, distillation losses, and parameter
//! storage / checkpointing.

pub mod align;
pub mod distill;
pub mod encoder;
pub mod params;
pub mod ssl;

pub use align::{bidirectional_align, classify, cross_entropy, scaled_dot_attention, AlignConfig, AlignHead};
pub use distill::{feature_distill_loss, kd_loss, soften, DistillConfig, DistillMode, TeacherKind};
pub use encoder::{count_flops, normalize_adjacency, Encoder, EncoderConfig};
pub use params::{load_checkpoint, save_checkpoint, ParamStore, ParamTensors};
pub use ssl::{
    asma_pretrain_loss, barlow_loss, cross_correlation, BarlowLossConfig, PretrainLossParts,
    Projector, ProjectorConfig,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("degenerate graph: {0}")]
    DegenerateGraph(String),
    #[error("batch too small: need at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("zero vector encountered (norm below 1e-12)")]
    ZeroVector,
    #[error("checkpoint digest mismatch: expected {expected}, found {found}")]
    CheckpointMismatch { expected: String, found: String },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Ad(#[from] crate::ad::AdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
