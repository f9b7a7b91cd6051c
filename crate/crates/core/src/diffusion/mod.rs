//! Toy latent denoiser with frozen base weights, the paired cross-attention
//! layers that inject pooled pair tokens, and the trainer and sampler.

mod attention;
mod codec;
mod model;
mod sample;
mod schedule;
mod train;
mod unet;

pub use attention::{
    check_alpha, paired_cross_attention, AttnContext, CrossAttention, CrossAttentionSite,
    PairedAttentionLayer, PairedContext,
};
pub use codec::LatentCodec;
pub use model::{ConditioningVariant, LotsModel, ModelConfig, Precision, DEFAULT_GLOBAL_TEXT};
pub use sample::{sample, ConditionSet, GeneratedImage, Provenance, SampleOptions};
pub use schedule::{NoiseSchedule, ScheduleConfig};
pub use train::{rectangle_fixture, smoothed_loss, StepReport, TrainConfig, Trainer, TrainingSample};
pub use unet::{silu, timestep_embedding, Conditioning, UNet, UNetConfig};
