//! Frozen transformer encoders with low-rank adaptation and image/video
//! fusion attention.

mod accounting;
mod attention;
mod backbone;
mod config;
mod lora;
mod model;

pub use accounting::count_trainable_params;
pub use attention::{
    attention_cost, block_forward, image_level_attention, ivfusion_attention, measure_attention_cost,
    video_level_attention, BlockCtx, BlockVars, BlockWeights, CostMeter, FrameTokens, LayerParams, LayerVars,
    LoraFactors, TokenLayout,
};
pub use backbone::{Backbone, TextBackbone, VisionBackbone};
pub use config::{Architecture, AttentionScheme, ComponentFlags, ModelConfig};
pub use lora::{adapter, lora_linear, AdapterVars, FusionAdapter, LoraLinear, LoraVars};
pub use model::{Mode, Model, VideoFeatures, MAX_LOGIT_SCALE};
