use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::{block_forward, BlockCtx, LayerVars, TokenLayout};
use super::backbone::Backbone;
use super::config::{Architecture, AttentionScheme, ModelConfig};
use super::lora::{AdapterVars, LoraVars};
use crate::error::{Error, Result};
use crate::numerics::{Bound, Graph, ParamId, ParamStore, Tensor, Var};

/// Upper bound on the inverse temperature.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

#[derive(Clone, Copy, Debug)]
struct LoraIds {
    q_down: ParamId,
    q_up: ParamId,
    v_down: ParamId,
    v_up: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct AdapterIds {
    down: ParamId,
    up: ParamId,
}

#[derive(Clone, Debug, Default)]
struct LayerIds {
    lora: Option<LoraIds>,
    adapter: Option<AdapterIds>,
}

/// Frozen backbone plus trainable low-rank deltas, fusion adapters and
/// the log inverse temperature.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub arch: Architecture,
    backbone: Arc<Backbone>,
    pub params: ParamStore,
    vision_ids: Vec<LayerIds>,
    text_ids: Vec<LayerIds>,
    logit_scale: ParamId,
}

/// Graph outputs of the vision encoder for a batch of `B` videos.
#[derive(Clone, Copy, Debug)]
pub struct VideoFeatures {
    /// `[B*F, d_embed]`, unit rows.
    pub v_img: Var,
    /// `[B, d_embed]`, unit rows.
    pub v_vid: Var,
}

/// Which trainable parts a forward pass uses.
#[derive(Clone, Copy, Debug)]
pub enum Mode<'a> {
    /// Frozen backbone only.
    Backbone,
    /// Trainable parts bound on the graph (differentiable or constant).
    With(&'a Bound),
}

impl Model {
    /// Builds the model; the backbone comes from `backbone_seed`, the
    /// trainable initialization from `init_seed`.
    pub fn new(config: ModelConfig, arch: Architecture, backbone_seed: u64, init_seed: u64) -> Result<Self> {
        config.validate()?;
        arch.validate()?;
        let backbone = Arc::new(Backbone::random(&config, backbone_seed));
        Self::with_backbone(config, arch, backbone, init_seed)
    }

    pub fn with_backbone(config: ModelConfig, arch: Architecture, backbone: Arc<Backbone>, init_seed: u64) -> Result<Self> {
        config.validate()?;
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut params = ParamStore::new();
        let r = config.rank;
        let mut make_layers = |prefix: &str, d: usize, layers: usize, fusion: usize, top: AttentionScheme| {
            (0..layers)
                .map(|l| {
                    let lora = arch.lora.then(|| {
                        let std = 1.0 / (d as f64).sqrt();
                        LoraIds {
                            q_down: params.add(format!("{prefix}.{l}.lora_q.down"), Tensor::randn([r, d], std, &mut rng), true),
                            q_up: params.add(format!("{prefix}.{l}.lora_q.up"), Tensor::zeros([d, r]), true),
                            v_down: params.add(format!("{prefix}.{l}.lora_v.down"), Tensor::randn([r, d], std, &mut rng), true),
                            v_up: params.add(format!("{prefix}.{l}.lora_v.up"), Tensor::zeros([d, r]), true),
                        }
                    });
                    let adapter = (l >= layers - fusion && top.has_adapter()).then(|| AdapterIds {
                        down: params.add(
                            format!("{prefix}.{l}.adapter.down"),
                            Tensor::randn([d, r], 1.0 / (d as f64).sqrt(), &mut rng),
                            true,
                        ),
                        up: params.add(format!("{prefix}.{l}.adapter.up"), Tensor::zeros([r, d]), true),
                    });
                    LayerIds { lora, adapter }
                })
                .collect::<Vec<_>>()
        };
        let vision_ids =
            make_layers("vision", config.d_vision, config.layers_vision, config.fusion_layers_vision, arch.vision_top);
        let text_ids = make_layers("text", config.d_text, config.layers_text, config.fusion_layers_text, arch.text_top);
        let logit_scale = params.add("logit_scale", Tensor::new([1], vec![(1.0 / config.tau_init).ln()])?, false);
        Ok(Self { config, arch, backbone, params, vision_ids, text_ids, logit_scale })
    }

    pub fn backbone(&self) -> &Arc<Backbone> {
        &self.backbone
    }

    pub fn logit_scale_id(&self) -> ParamId {
        self.logit_scale
    }

    /// Current inverse temperature `1/τ`, clamped to [`MAX_LOGIT_SCALE`].
    pub fn inverse_temperature(&self) -> f64 {
        self.params.get(self.logit_scale).item().exp().min(MAX_LOGIT_SCALE)
    }

    /// Trainable scalars in the low-rank deltas and adapters (the temperature is excluded).
    pub fn adaptation_param_count(&self) -> usize {
        self.params.scalar_count() - 1
    }

    /// `1/τ` on the graph.
    pub fn logit_scale_var(&self, g: &mut Graph, mode: Mode<'_>) -> Var {
        let raw = match mode {
            Mode::With(b) => b.var(self.logit_scale),
            Mode::Backbone => g.constant(self.params.get(self.logit_scale).clone()),
        };
        let e = g.exp(raw);
        g.min_const(e, MAX_LOGIT_SCALE)
    }

    fn vision_scheme(&self, layer: usize) -> AttentionScheme {
        let c = &self.config;
        if layer >= c.layers_vision - c.fusion_layers_vision {
            self.arch.vision_top
        } else {
            AttentionScheme::ImageLevel
        }
    }

    fn text_scheme(&self, layer: usize) -> AttentionScheme {
        let c = &self.config;
        if layer >= c.layers_text - c.fusion_layers_text {
            self.arch.text_top
        } else {
            AttentionScheme::ImageLevel
        }
    }

    fn layer_vars(&self, block: LayerVars, ids: &LayerIds, mode: Mode<'_>) -> LayerVars {
        let Mode::With(b) = mode else { return block };
        let s = self.config.lora_scaling;
        LayerVars {
            lora_q: ids.lora.map(|l| LoraVars { down: b.var(l.q_down), up: b.var(l.q_up), scaling: s }),
            lora_v: ids.lora.map(|l| LoraVars { down: b.var(l.v_down), up: b.var(l.v_up), scaling: s }),
            adapter: ids.adapter.map(|a| AdapterVars { down: b.var(a.down), up: b.var(a.up) }),
            ..block
        }
    }

    /// Vision encoder over `frames: [B, F, N+1, d_input]`.
    pub fn encode_video_graph(&self, g: &mut Graph, mode: Mode<'_>, frames: &Tensor) -> Result<VideoFeatures> {
        let c = &self.config;
        let t = c.tokens_per_frame();
        let (b, f) = match frames.shape() {
            &[b, f, tt, di] if tt == t && di == c.d_input => (b, f),
            s => {
                return Err(Error::Shape(format!(
                    "frames must be [B, F, {t}, {}], got {s:?}",
                    c.d_input
                )))
            }
        };
        if f != c.frames {
            return Err(Error::Arity { what: "frames", expected: c.frames, actual: f });
        }
        let vb = &self.backbone.vision;
        let x = g.constant(frames.reshape([b * f * t, c.d_input])?);
        let stem_w = g.constant_shared(vb.stem_w.clone());
        let stem_b = g.constant_shared(vb.stem_b.clone());
        let x = g.linear(x, stem_w)?;
        let x = g.add_row(x, stem_b)?;
        let pos_rows: Vec<usize> = (0..b * f).flat_map(|_| 0..t).collect();
        let pos = g.constant_shared(vb.pos.clone());
        let pos = g.select_rows(pos, &pos_rows)?;
        let x = g.add(x, pos)?;
        let lg = g.constant_shared(vb.ln_pre_gamma.clone());
        let lb = g.constant_shared(vb.ln_pre_beta.clone());
        let mut x = g.layer_norm(x, lg, lb)?;

        let layout = TokenLayout::frames(b, f, t);
        let ctx = BlockCtx { heads: c.heads, meter: None };
        for (l, block) in vb.blocks.iter().enumerate() {
            let base = LayerVars { block: block.bind(g), lora_q: None, lora_v: None, adapter: None };
            let vars = self.layer_vars(base, &self.vision_ids[l], mode);
            x = block_forward(g, x, &layout, &vars, self.vision_scheme(l), ctx)?;
        }
        let cls = g.select_rows(x, &layout.summary_rows())?;
        let lg = g.constant_shared(vb.ln_post_gamma.clone());
        let lb = g.constant_shared(vb.ln_post_beta.clone());
        let cls = g.layer_norm(cls, lg, lb)?;
        let proj = g.constant_shared(vb.proj.clone());
        let feats = g.linear(cls, proj)?;
        let v_img = g.l2_normalize(feats)?;
        let per_video = g.reshape(feats, &[b, f, c.d_embed])?;
        let per_video = g.permute(per_video, &[0, 2, 1])?;
        let pooled = g.mean_last(per_video);
        let v_vid = g.l2_normalize(pooled)?;
        Ok(VideoFeatures { v_img, v_vid })
    }

    /// Text encoder over `groups` sets of `per_group` captions each.
    /// Returns unit rows `[groups*per_group, d_embed]`.
    pub fn encode_text_graph(&self, g: &mut Graph, mode: Mode<'_>, captions: &[Vec<u32>], per_group: usize) -> Result<Var> {
        let c = &self.config;
        if per_group == 0 || captions.is_empty() || !captions.len().is_multiple_of(per_group) {
            return Err(Error::Arity { what: "captions per group", expected: per_group, actual: captions.len() });
        }
        let groups = captions.len() / per_group;
        let mut truncated = 0;
        let lengths: Vec<usize> = captions
            .iter()
            .map(|cap| {
                if cap.len() > c.max_caption_len {
                    truncated += 1;
                }
                cap.len().min(c.max_caption_len)
            })
            .collect();
        if truncated > 0 {
            log::warn!("{truncated} caption(s) longer than {} tokens were truncated", c.max_caption_len);
        }
        if lengths.contains(&0) {
            return Err(Error::EmptyInput("caption with no tokens".into()));
        }
        let seg_len = *lengths.iter().max().unwrap_or(&1);
        let mut ids = Vec::with_capacity(captions.len() * seg_len);
        let mut pos_rows = Vec::with_capacity(captions.len() * seg_len);
        for cap in captions {
            for p in 0..seg_len {
                let tok = cap.get(p).copied().filter(|_| p < c.max_caption_len).unwrap_or(0) as usize;
                if tok >= c.vocab_size {
                    return Err(Error::Domain(format!("token id {tok} outside vocabulary of {}", c.vocab_size)));
                }
                ids.push(tok);
                pos_rows.push(p);
            }
        }
        let tb = &self.backbone.text;
        let emb = g.constant_shared(tb.token_emb.clone());
        let x = g.select_rows(emb, &ids)?;
        let pos = g.constant_shared(tb.pos.clone());
        let pos = g.select_rows(pos, &pos_rows)?;
        let mut x = g.add(x, pos)?;

        let layout = TokenLayout::captions(groups, per_group, seg_len, lengths)?;
        let ctx = BlockCtx { heads: c.heads, meter: None };
        for (l, block) in tb.blocks.iter().enumerate() {
            let base = LayerVars { block: block.bind(g), lora_q: None, lora_v: None, adapter: None };
            let vars = self.layer_vars(base, &self.text_ids[l], mode);
            x = block_forward(g, x, &layout, &vars, self.text_scheme(l), ctx)?;
        }
        let summary = g.select_rows(x, &layout.summary_rows())?;
        let lg = g.constant_shared(tb.ln_final_gamma.clone());
        let lb = g.constant_shared(tb.ln_final_beta.clone());
        let summary = g.layer_norm(summary, lg, lb)?;
        let proj = g.constant_shared(tb.proj.clone());
        let feats = g.linear(summary, proj)?;
        g.l2_normalize(feats)
    }

    fn run<T>(&self, backbone_only: bool, f: impl FnOnce(&mut Graph, Mode<'_>) -> Result<T>) -> Result<T> {
        let mut g = Graph::new();
        if backbone_only {
            f(&mut g, Mode::Backbone)
        } else {
            let bound = self.params.bind_frozen(&mut g);
            f(&mut g, Mode::With(&bound))
        }
    }

    /// `(v_img: [F, d_embed], v_vid: [d_embed])` for one video `[F, N+1, d_input]`.
    pub fn encode_video(&self, frames: &Tensor) -> Result<(Tensor, Tensor)> {
        self.encode_video_with(frames, false)
    }

    pub fn encode_video_with(&self, frames: &Tensor, backbone_only: bool) -> Result<(Tensor, Tensor)> {
        let mut shape = vec![1];
        shape.extend_from_slice(frames.shape());
        let batch = frames.reshape(shape)?;
        self.run(backbone_only, |g, mode| {
            let v = self.encode_video_graph(g, mode, &batch)?;
            Ok((g.value(v.v_img).clone(), g.value(v.v_vid).reshape([self.config.d_embed])?))
        })
    }

    /// Summary feature `[d_embed]` of one video caption.
    pub fn encode_video_caption(&self, tokens: &[u32]) -> Result<Tensor> {
        self.encode_video_caption_with(tokens, false)
    }

    pub fn encode_video_caption_with(&self, tokens: &[u32], backbone_only: bool) -> Result<Tensor> {
        self.run(backbone_only, |g, mode| {
            let t = self.encode_text_graph(g, mode, &[tokens.to_vec()], 1)?;
            g.value(t).reshape([self.config.d_embed])
        })
    }

    /// Features `[F, d_embed]` of one video's pseudo image captions.
    pub fn encode_pseudo_captions(&self, captions: &[Vec<u32>]) -> Result<Tensor> {
        self.encode_pseudo_captions_with(captions, false)
    }

    pub fn encode_pseudo_captions_with(&self, captions: &[Vec<u32>], backbone_only: bool) -> Result<Tensor> {
        if captions.len() != self.config.frames {
            return Err(Error::Arity { what: "pseudo captions", expected: self.config.frames, actual: captions.len() });
        }
        self.run(backbone_only, |g, mode| {
            let t = self.encode_text_graph(g, mode, captions, captions.len())?;
            Ok(g.value(t).clone())
        })
    }
}
