//! Latent rectified-flow generator: convolutional codec, diffusion
//! transformer with LoRA deltas, training objective and Euler sampler.

mod backbone;
mod codec;
mod lora;
mod objective;
mod sampler;

pub use backbone::{weights_digest, Backbone, BackboneConfig};
pub use codec::{pretrain_codec, Codec, CodecConfig, CodecTraining, CODEC_FACTOR};
pub use lora::{numerical_rank, LoraConfig, LoraLinear};
pub use objective::{
    diffusion_loss, make_flow_sample, randn_like, ssim_tensor, DiffusionLoss, FlowSample, SigmaDistribution,
};
pub use sampler::{euler_integrate, sample, sample_latent, sigma_schedule, SamplerConfig, VelocityField};
