//! Small pre-norm transformer used as encoder, decoder and teacher.

mod adapter;
mod config;
mod forward;
mod mask;
mod weights;

pub use adapter::{merge_adapter, AdapterConfig, AdapterTargets, LowRankAdapter};
pub use config::ModelConfig;
pub use forward::{forward, BoundModel, InputItem, Segment};
pub use mask::{AttentionMask, MaskKind};
pub use weights::{attention_matrices, ffn_matrices, layout, ModelWeights, INIT_STD};
