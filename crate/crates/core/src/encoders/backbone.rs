use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::BlockWeights;
use super::config::ModelConfig;
use crate::numerics::Tensor;

/// Frozen vision tower.
#[derive(Clone, Debug)]
pub struct VisionBackbone {
    /// `[d_vision, d_input]`
    pub stem_w: Arc<Tensor>,
    pub stem_b: Arc<Tensor>,
    /// `[N+1, d_vision]`, shared by every frame.
    pub pos: Arc<Tensor>,
    pub ln_pre_gamma: Arc<Tensor>,
    pub ln_pre_beta: Arc<Tensor>,
    pub blocks: Vec<BlockWeights>,
    pub ln_post_gamma: Arc<Tensor>,
    pub ln_post_beta: Arc<Tensor>,
    /// `[d_embed, d_vision]`
    pub proj: Arc<Tensor>,
}

/// Frozen text tower.
#[derive(Clone, Debug)]
pub struct TextBackbone {
    /// `[vocab, d_text]`
    pub token_emb: Arc<Tensor>,
    /// `[max_caption_len, d_text]`
    pub pos: Arc<Tensor>,
    pub blocks: Vec<BlockWeights>,
    pub ln_final_gamma: Arc<Tensor>,
    pub ln_final_beta: Arc<Tensor>,
    /// `[d_embed, d_text]`
    pub proj: Arc<Tensor>,
}

/// Seeded stand-in for pretrained encoder weights.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub seed: u64,
    pub vision: VisionBackbone,
    pub text: TextBackbone,
}

impl Backbone {
    pub fn random(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arc = Arc::new;
        let dv = config.d_vision;
        let dt = config.d_text;
        let vision = VisionBackbone {
            stem_w: arc(Tensor::randn([dv, config.d_input], 1.0 / (config.d_input as f64).sqrt(), &mut rng)),
            stem_b: arc(Tensor::zeros([dv])),
            pos: arc(Tensor::randn([config.tokens_per_frame(), dv], 0.1, &mut rng)),
            ln_pre_gamma: arc(Tensor::full([dv], 1.0)),
            ln_pre_beta: arc(Tensor::zeros([dv])),
            blocks: (0..config.layers_vision).map(|_| BlockWeights::random(dv, config.mlp_ratio, &mut rng)).collect(),
            ln_post_gamma: arc(Tensor::full([dv], 1.0)),
            ln_post_beta: arc(Tensor::zeros([dv])),
            proj: arc(Tensor::randn([config.d_embed, dv], 1.0 / (dv as f64).sqrt(), &mut rng)),
        };
        let text = TextBackbone {
            token_emb: arc(Tensor::randn([config.vocab_size, dt], 1.0, &mut rng)),
            pos: arc(Tensor::randn([config.max_caption_len, dt], 0.1, &mut rng)),
            blocks: (0..config.layers_text).map(|_| BlockWeights::random(dt, config.mlp_ratio, &mut rng)).collect(),
            ln_final_gamma: arc(Tensor::full([dt], 1.0)),
            ln_final_beta: arc(Tensor::zeros([dt])),
            proj: arc(Tensor::randn([config.d_embed, dt], 1.0 / (dt as f64).sqrt(), &mut rng)),
        };
        Self { seed, vision, text }
    }
}
