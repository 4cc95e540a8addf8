//! Joint-embedding temporal predictor: ViT context encoder, EMA target
//! encoder, transformer predictor, projection head into the 64-channel
//! foundation space, multi-block masking and the hybrid loss.

mod ema;
mod loss;
mod mask;
mod predictor;
mod vit;

pub use ema::{ema_update, EmaSchedule};
pub use loss::{jepa_loss, spatial_std, JepaLoss, JepaLossInput, JepaLossWeights, ReconstructionScope};
pub use mask::{sample_mask, Block, MaskConfig, MaskSpec};
pub use predictor::{predict_future, Predictor, PredictorConfig};
pub use vit::{patchify, ProjectionHead, VitConfig, VitEncoder};
