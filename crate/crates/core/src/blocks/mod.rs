//! Vector quantization, instance normalization and the contrastive
//! predictive coding objective, as standalone blocks.

pub mod cpc;
pub mod instance_norm;
pub mod loss;
pub mod vq;

pub use cpc::{info_nce, CpcCache, CpcModule, NegativeSource};
pub use instance_norm::{instance_norm, instance_norm_backward, InstanceNormCache};
pub use loss::{
    l1_distance, reconstruction_loss, vq_loss, weighted_mse, Flow, LossBundle, VqGrads,
    DEFAULT_BETA,
};
pub use vq::{quantize, straight_through_backward, Codebook, ContentEmbedding};
