use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and loss hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_vision: usize,
    pub d_text: usize,
    pub d_embed: usize,
    /// Width of raw frame tokens before the frozen stem projection.
    pub d_input: usize,
    pub layers_vision: usize,
    pub layers_text: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Frames per video.
    pub frames: usize,
    /// Patch tokens per frame (the global token is extra).
    pub patches: usize,
    /// Fusion layers at the top of the vision encoder.
    pub fusion_layers_vision: usize,
    /// Fusion layers at the top of the text encoder.
    pub fusion_layers_text: usize,
    /// LoRA rank, also the adapter bottleneck width.
    pub rank: usize,
    pub lora_scaling: f64,
    pub tau_init: f64,
    pub alpha: f64,
    pub beta: f64,
    pub max_caption_len: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::clip_b32()
    }
}

impl ModelConfig {
    /// CLIP ViT-B/32 widths and depths.
    pub fn clip_b32() -> Self {
        Self {
            d_vision: 768,
            d_text: 512,
            d_embed: 512,
            d_input: 768,
            layers_vision: 12,
            layers_text: 12,
            heads: 8,
            mlp_ratio: 4,
            frames: 12,
            patches: 49,
            fusion_layers_vision: 4,
            fusion_layers_text: 2,
            rank: 8,
            lora_scaling: 1.0,
            tau_init: 0.07,
            alpha: 0.3,
            beta: 1.0,
            max_caption_len: 32,
            vocab_size: 49408,
        }
    }

    /// Small configuration used for training runs and tests.
    pub fn desk() -> Self {
        Self {
            d_vision: 64,
            d_text: 64,
            d_embed: 64,
            d_input: 32,
            layers_vision: 4,
            layers_text: 2,
            heads: 4,
            mlp_ratio: 4,
            frames: 4,
            patches: 8,
            fusion_layers_vision: 2,
            fusion_layers_text: 1,
            rank: 8,
            lora_scaling: 1.0,
            tau_init: 0.07,
            alpha: 0.3,
            beta: 1.0,
            max_caption_len: 32,
            vocab_size: 1024,
        }
    }

    /// Minimal configuration for gradient checks (`d = 8`, two frames).
    pub fn toy() -> Self {
        Self {
            d_vision: 8,
            d_text: 8,
            d_embed: 8,
            d_input: 6,
            layers_vision: 2,
            layers_text: 2,
            heads: 2,
            mlp_ratio: 2,
            frames: 2,
            patches: 2,
            fusion_layers_vision: 1,
            fusion_layers_text: 1,
            rank: 2,
            lora_scaling: 1.0,
            tau_init: 0.5,
            alpha: 0.3,
            beta: 1.0,
            max_caption_len: 8,
            vocab_size: 32,
        }
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.patches + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.fusion_layers_vision > self.layers_vision {
            return bad(format!(
                "fusion_layers_vision {} exceeds layers_vision {}",
                self.fusion_layers_vision, self.layers_vision
            ));
        }
        if self.fusion_layers_text > self.layers_text {
            return bad(format!(
                "fusion_layers_text {} exceeds layers_text {}",
                self.fusion_layers_text, self.layers_text
            ));
        }
        if self.rank < 1 {
            return bad("rank must be >= 1".into());
        }
        if self.frames < 1 {
            return bad("frames must be >= 1".into());
        }
        if !(self.tau_init > 0.0) {
            return bad(format!("tau_init must be > 0, got {}", self.tau_init));
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return bad(format!("alpha and beta must be >= 0, got {} and {}", self.alpha, self.beta));
        }
        if self.heads == 0 || !self.d_vision.is_multiple_of(self.heads) || !self.d_text.is_multiple_of(self.heads) {
            return bad(format!(
                "heads {} must divide d_vision {} and d_text {}",
                self.heads, self.d_vision, self.d_text
            ));
        }
        if self.d_vision == 0 || self.d_text == 0 || self.d_embed == 0 || self.d_input == 0 {
            return bad("widths must be positive".into());
        }
        if self.max_caption_len == 0 || self.vocab_size < 2 {
            return bad("max_caption_len must be >= 1 and vocab_size >= 2".into());
        }
        Ok(())
    }
}

/// How a layer's self-attention groups tokens across frames (or captions).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScheme {
    /// Each frame attends only within itself.
    ImageLevel,
    /// All frames are concatenated into one sequence.
    VideoLevel,
    /// Per-frame attention plus a cross-frame branch for the global tokens,
    /// merged by a bottleneck adapter.
    IvFusion,
    /// Fusion branches averaged, without the adapter.
    IvFusionNoAdapter,
}

impl AttentionScheme {
    pub fn has_adapter(self) -> bool {
        matches!(self, Self::IvFusion)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::ImageLevel => "image_level",
            Self::VideoLevel => "video_level",
            Self::IvFusion => "ivfusion",
            Self::IvFusionNoAdapter => "ivfusion_no_adapter",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "image_level" => Self::ImageLevel,
            "video_level" => Self::VideoLevel,
            "ivfusion" => Self::IvFusion,
            "ivfusion_no_adapter" => Self::IvFusionNoAdapter,
            other => return Err(Error::Config(format!("unknown attention scheme {other:?}"))),
        })
    }
}

/// Which trainable components exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentFlags {
    pub lora: bool,
    pub vision_adapters: bool,
    pub text_adapters: bool,
}

impl ComponentFlags {
    pub const LORA_ONLY: Self = Self { lora: true, vision_adapters: false, text_adapters: false };
    pub const ALL: Self = Self { lora: true, vision_adapters: true, text_adapters: true };
}

/// Per-encoder attention placement: the bottom layers are image-level, the
/// top fusion layers use `vision_top` / `text_top`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub lora: bool,
    pub vision_top: AttentionScheme,
    pub text_top: AttentionScheme,
}

impl Architecture {
    pub fn flags(&self) -> ComponentFlags {
        ComponentFlags {
            lora: self.lora,
            vision_adapters: self.vision_top.has_adapter(),
            text_adapters: self.text_top.has_adapter(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.text_top, AttentionScheme::ImageLevel | AttentionScheme::IvFusion) {
            return Err(Error::Config(format!(
                "text encoder supports image_level or ivfusion, got {}",
                self.text_top.name()
            )));
        }
        Ok(())
    }
}

impl Default for Architecture {
    fn default() -> Self {
        Self { lora: true, vision_top: AttentionScheme::IvFusion, text_top: AttentionScheme::IvFusion }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::clip_b32().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
    }

    #[test]
    fn invariants_are_enforced() {
        let mut c = ModelConfig::toy();
        c.fusion_layers_vision = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.rank = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.tau_init = 0.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.alpha = -0.1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in [
            AttentionScheme::ImageLevel,
            AttentionScheme::VideoLevel,
            AttentionScheme::IvFusion,
            AttentionScheme::IvFusionNoAdapter,
        ] {
            assert_eq!(AttentionScheme::parse(s.name()).unwrap(), s);
        }
        assert!(AttentionScheme::parse("nope").is_err());
    }
}
