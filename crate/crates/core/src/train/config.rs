use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::alignment::{LossWeights, SimilarityMode};
use crate::data::SyntheticParams;
use crate::encoders::{Architecture, AttentionScheme, ComponentFlags, ModelConfig};
use crate::error::{Error, Result};

/// Optional re-ranking applied before computing retrieval metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Postprocess {
    None,
    Dsl,
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    #[serde(flatten)]
    pub model: ModelConfig,
    pub lora: bool,
    /// Attention in the top vision layers.
    pub vision_scheme: AttentionScheme,
    /// Attention in the top text layers while image-level alignment is active.
    pub text_scheme: AttentionScheme,
    pub similarity: SimilarityMode,
    pub distill: bool,
    pub detach_teacher: bool,

    pub lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,

    pub seed: u64,
    pub corpus_size: usize,
    pub train_size: usize,
    pub latent_dim: usize,
    pub noise_scale: f64,
    pub frame_spread: f64,
    pub bins: usize,
    /// Saved corpus to use instead of generating one.
    pub corpus_path: Option<PathBuf>,
    /// Pseudo-caption TSV replacing the corpus' own pseudo captions.
    pub pseudo_captions_path: Option<PathBuf>,

    pub postprocess: Postprocess,
    pub dsl_temperature: f64,
    pub out_dir: PathBuf,
}

/// Names accepted by [`RunConfig::preset`].
pub const PRESETS: &[&str] = &[
    "lora",
    "b1",
    "b2",
    "b3",
    "full",
    "video_level",
    "ivfusion_no_adapter",
    "pimg_paired",
    "pimg_video_level",
];

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// The full method at desk scale.
    pub fn desk() -> Self {
        Self {
            preset: "full".into(),
            model: ModelConfig::desk(),
            lora: true,
            vision_scheme: AttentionScheme::IvFusion,
            text_scheme: AttentionScheme::IvFusion,
            similarity: SimilarityMode::FineGrained,
            distill: true,
            detach_teacher: true,
            lr: 3e-2,
            weight_decay: 0.2,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-6,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            corpus_size: 512,
            train_size: 448,
            latent_dim: 8,
            noise_scale: 0.1,
            frame_spread: 0.5,
            bins: 6,
            corpus_path: None,
            pseudo_captions_path: None,
            postprocess: Postprocess::None,
            dsl_temperature: crate::retrieval::DSL_TEMPERATURE,
            out_dir: PathBuf::from("runs"),
        }
    }

    /// Desk-scale configuration with the component choices of a named preset.
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = Self::desk();
        c.apply_preset(name)?;
        Ok(c)
    }

    /// Overwrites the component choices, leaving sizes and optimizer settings alone.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        use AttentionScheme::*;
        let (vision, text, sim, alpha, distill) = match name {
            "lora" => (ImageLevel, ImageLevel, SimilarityMode::None, 0.0, false),
            "b1" => (IvFusion, ImageLevel, SimilarityMode::None, 0.0, false),
            "b2" => (IvFusion, IvFusion, SimilarityMode::FineGrained, 0.3, false),
            "b3" => (IvFusion, ImageLevel, SimilarityMode::FineGrained, 0.0, true),
            "full" => (IvFusion, IvFusion, SimilarityMode::FineGrained, 0.3, true),
            "video_level" => (VideoLevel, ImageLevel, SimilarityMode::None, 0.0, false),
            "ivfusion_no_adapter" => (IvFusionNoAdapter, ImageLevel, SimilarityMode::None, 0.0, false),
            "pimg_paired" => (IvFusion, IvFusion, SimilarityMode::Paired, 0.3, true),
            "pimg_video_level" => (IvFusion, IvFusion, SimilarityMode::VideoLevelAvg, 0.3, true),
            other => return Err(Error::Config(format!("unknown preset {other:?}; known: {}", PRESETS.join(", ")))),
        };
        self.preset = name.into();
        self.lora = true;
        self.vision_scheme = vision;
        self.text_scheme = text;
        self.similarity = sim;
        self.model.alpha = alpha;
        self.distill = distill;
        self.model.beta = if distill { 1.0 } else { 0.0 };
        Ok(())
    }

    /// Whether the pseudo image-level alignment term is optimized.
    pub fn image_align_active(&self) -> bool {
        self.similarity != SimilarityMode::None && self.model.alpha > 0.0
    }

    pub fn distill_active(&self) -> bool {
        self.distill && self.model.beta > 0.0
    }

    /// Whether pseudo captions are encoded at all.
    pub fn needs_pseudo_captions(&self) -> bool {
        self.image_align_active() || self.distill_active()
    }

    /// Text fusion adapters are only built when image-level alignment uses them.
    pub fn architecture(&self) -> Architecture {
        Architecture {
            lora: self.lora,
            vision_top: self.vision_scheme,
            text_top: if self.image_align_active() { self.text_scheme } else { AttentionScheme::ImageLevel },
        }
    }

    pub fn flags(&self) -> ComponentFlags {
        self.architecture().flags()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: if self.image_align_active() { self.model.alpha } else { 0.0 },
            beta: if self.distill_active() { self.model.beta } else { 0.0 },
            detach_teacher: self.detach_teacher,
        }
    }

    pub fn synthetic_params(&self) -> SyntheticParams {
        SyntheticParams {
            seed: self.seed,
            size: self.corpus_size,
            latent_dim: self.latent_dim,
            noise_scale: self.noise_scale,
            frame_spread: self.frame_spread,
            bins: self.bins,
        }
    }

    pub fn backbone_seed(&self) -> u64 {
        self.seed.wrapping_add(0x9e37_79b9_7f4a_7c15)
    }

    pub fn init_seed(&self) -> u64 {
        self.seed.wrapping_add(0x6a09_e667_f3bc_c909)
    }

    pub fn shuffle_seed(&self) -> u64 {
        self.seed.wrapping_add(0xbb67_ae85_84ca_a73b)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.architecture().validate()?;
        self.loss_weights().validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.distill_active() && self.similarity == SimilarityMode::None {
            return bad("distillation needs an image-level similarity; set similarity".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and adam_eps must be > 0".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.corpus_path.is_none() && (self.train_size < self.batch_size || self.train_size >= self.corpus_size) {
            return bad(format!(
                "train_size {} must be in [batch_size {}, corpus_size {})",
                self.train_size, self.batch_size, self.corpus_size
            ));
        }
        if !(self.dsl_temperature > 0.0) {
            return bad(format!("dsl_temperature must be > 0, got {}", self.dsl_temperature));
        }
        Ok(())
    }

    /// Digest of everything that determines the model's parameters' layout and
    /// the frozen backbone.
    pub fn model_hash(&self) -> String {
        let key = serde_json::json!({
            "model": self.model,
            "architecture": {
                "lora": self.architecture().lora,
                "vision_top": self.architecture().vision_top,
                "text_top": self.architecture().text_top,
            },
            "backbone_seed": self.backbone_seed(),
        });
        hex::encode(Sha256::digest(key.to_string().as_bytes()))
    }

    fn to_map(&self) -> Map<String, Value> {
        match serde_json::to_value(self).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("config is a struct"),
        }
    }

    /// Sets one field from its textual form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "preset" {
            return self.apply_preset(value);
        }
        let mut map = self.to_map();
        let current = map
            .get(key)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        let bad = || Error::Config(format!("invalid value {value:?} for {key}"));
        let parsed = match current {
            Value::Bool(_) => Value::Bool(value.parse().map_err(|_| bad())?),
            Value::Number(_) => {
                if let Ok(u) = value.parse::<u64>() {
                    Value::from(u)
                } else {
                    let f: f64 = value.parse().map_err(|_| bad())?;
                    Value::from(f)
                }
            }
            Value::Null | Value::String(_) if key.ends_with("_path") && (value.is_empty() || value == "none") => Value::Null,
            _ => Value::String(value.to_owned()),
        };
        map.insert(key.to_owned(), parsed);
        *self = serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment. A `preset` line is
    /// applied before the others regardless of position.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            pairs.push((k.trim().to_owned(), v.trim().to_owned()));
        }
        self.apply_pairs(&pairs)
    }

    /// As [`RunConfig::apply_kv`] for already split pairs.
    pub fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs.iter().filter(|(k, _)| k == "preset") {
            self.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::desk();
        c.apply_kv(text)?;
        c.validate()?;
        Ok(c)
    }

    /// One `key = value` line per field, keys sorted.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_map() {
            let v = match v {
                Value::String(s) => s,
                Value::Null => "none".into(),
                other => other.to_string(),
            };
            writeln!(out, "{k} = {v}").expect("writing to a String");
        }
        out
    }
}
