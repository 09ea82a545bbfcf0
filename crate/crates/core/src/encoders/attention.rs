//! Transformer blocks with image-level, video-level and fusion attention.
//!
//! Token rows are laid out `[group][segment][position]`: a group is one video
//! (or one caption set), a segment is one frame (or one caption). Each
//! segment has a single summary token: position 0 for frames, the last valid
//! position for captions.

use std::cell::Cell;
use std::sync::Arc;

use rand::Rng;

use super::config::AttentionScheme;
use super::lora::{adapter, lora_linear, AdapterVars, FusionAdapter, LoraVars};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Frozen weights of one pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub ln1_gamma: Arc<Tensor>,
    pub ln1_beta: Arc<Tensor>,
    pub wq: Arc<Tensor>,
    pub bq: Arc<Tensor>,
    pub wk: Arc<Tensor>,
    pub bk: Arc<Tensor>,
    pub wv: Arc<Tensor>,
    pub bv: Arc<Tensor>,
    pub wo: Arc<Tensor>,
    pub bo: Arc<Tensor>,
    pub ln2_gamma: Arc<Tensor>,
    pub ln2_beta: Arc<Tensor>,
    pub fc_w: Arc<Tensor>,
    pub fc_b: Arc<Tensor>,
    pub proj_w: Arc<Tensor>,
    pub proj_b: Arc<Tensor>,
}

impl BlockWeights {
    /// Seeded random weights with `1/sqrt(fan_in)` scaling.
    pub fn random<R: Rng + ?Sized>(d: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        let hidden = d * mlp_ratio;
        let s = 1.0 / (d as f64).sqrt();
        let sh = 1.0 / (hidden as f64).sqrt();
        let mut mat = |rows, cols, std| Arc::new(Tensor::randn([rows, cols], std, rng));
        let wq = mat(d, d, s);
        let wk = mat(d, d, s);
        let wv = mat(d, d, s);
        let wo = mat(d, d, s);
        let fc_w = mat(hidden, d, s);
        let proj_w = mat(d, hidden, sh);
        let mut vec = |n, std| Arc::new(Tensor::randn([n], std, rng));
        Self {
            ln1_gamma: Arc::new(Tensor::full([d], 1.0)),
            ln1_beta: vec(d, 0.02),
            wq,
            bq: vec(d, 0.02),
            wk,
            bk: vec(d, 0.02),
            wv,
            bv: vec(d, 0.02),
            wo,
            bo: vec(d, 0.02),
            ln2_gamma: Arc::new(Tensor::full([d], 1.0)),
            ln2_beta: vec(d, 0.02),
            fc_w,
            fc_b: vec(hidden, 0.02),
            proj_w,
            proj_b: vec(d, 0.02),
        }
    }

    /// Identity attention projections with zero biases and an inert MLP.
    pub fn identity(d: usize, mlp_ratio: usize) -> Self {
        let eye = Arc::new(Tensor::eye(d));
        let zeros = Arc::new(Tensor::zeros([d]));
        Self {
            ln1_gamma: Arc::new(Tensor::full([d], 1.0)),
            ln1_beta: zeros.clone(),
            wq: eye.clone(),
            bq: zeros.clone(),
            wk: eye.clone(),
            bk: zeros.clone(),
            wv: eye.clone(),
            bv: zeros.clone(),
            wo: eye,
            bo: zeros.clone(),
            ln2_gamma: Arc::new(Tensor::full([d], 1.0)),
            ln2_beta: zeros.clone(),
            fc_w: Arc::new(Tensor::zeros([d * mlp_ratio, d])),
            fc_b: Arc::new(Tensor::zeros([d * mlp_ratio])),
            proj_w: Arc::new(Tensor::zeros([d, d * mlp_ratio])),
            proj_b: zeros,
        }
    }

    pub fn width(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph) -> BlockVars {
        let mut c = |t: &Arc<Tensor>| g.constant_shared(t.clone());
        BlockVars {
            ln1_gamma: c(&self.ln1_gamma),
            ln1_beta: c(&self.ln1_beta),
            wq: c(&self.wq),
            bq: c(&self.bq),
            wk: c(&self.wk),
            bk: c(&self.bk),
            wv: c(&self.wv),
            bv: c(&self.bv),
            wo: c(&self.wo),
            bo: c(&self.bo),
            ln2_gamma: c(&self.ln2_gamma),
            ln2_beta: c(&self.ln2_beta),
            fc_w: c(&self.fc_w),
            fc_b: c(&self.fc_b),
            proj_w: c(&self.proj_w),
            proj_b: c(&self.proj_b),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub fc_w: Var,
    pub fc_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
}

/// Graph handles for one layer: frozen block plus optional trainable parts.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub block: BlockVars,
    pub lora_q: Option<LoraVars>,
    pub lora_v: Option<LoraVars>,
    pub adapter: Option<AdapterVars>,
}

/// Counts query-key score evaluations, per head.
#[derive(Debug, Default)]
pub struct CostMeter(Cell<u64>);

impl CostMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.0.set(self.0.get() + n);
    }

    pub fn get(&self) -> u64 {
        self.0.get()
    }

    pub fn reset(&self) {
        self.0.set(0);
    }
}

/// Segment structure of a token batch.
#[derive(Clone, Debug)]
pub struct TokenLayout {
    pub groups: usize,
    pub segments: usize,
    pub seg_len: usize,
    /// Causal attention inside each segment (text).
    pub causal: bool,
    /// Valid tokens per segment, `groups * segments` entries; `None` means all valid.
    pub lengths: Option<Vec<usize>>,
    /// Summary-token position inside each segment.
    pub summary: Vec<usize>,
}

impl TokenLayout {
    /// Frames of `groups` videos with the global token first.
    pub fn frames(groups: usize, frames: usize, tokens_per_frame: usize) -> Self {
        Self {
            groups,
            segments: frames,
            seg_len: tokens_per_frame,
            causal: false,
            lengths: None,
            summary: vec![0; groups * frames],
        }
    }

    /// Causal captions padded to `seg_len`; the summary is the last valid token.
    pub fn captions(groups: usize, captions: usize, seg_len: usize, lengths: Vec<usize>) -> Result<Self> {
        if lengths.len() != groups * captions {
            return Err(Error::Arity { what: "caption lengths", expected: groups * captions, actual: lengths.len() });
        }
        if lengths.iter().any(|&l| l == 0 || l > seg_len) {
            return Err(Error::Shape(format!("caption lengths must be in 1..={seg_len}")));
        }
        let summary = lengths.iter().map(|l| l - 1).collect();
        Ok(Self { groups, segments: captions, seg_len, causal: true, lengths: Some(lengths), summary })
    }

    pub fn rows(&self) -> usize {
        self.groups * self.segments * self.seg_len
    }

    fn valid(&self, seg: usize, pos: usize) -> bool {
        self.lengths.as_ref().is_none_or(|l| pos < l[seg])
    }

    /// Row index of every segment's summary token.
    pub fn summary_rows(&self) -> Vec<usize> {
        self.summary.iter().enumerate().map(|(s, &p)| s * self.seg_len + p).collect()
    }

    fn needs_mask(&self) -> bool {
        self.causal || self.lengths.is_some()
    }

    fn image_mask(&self) -> Option<Vec<bool>> {
        if !self.needs_mask() {
            return None;
        }
        let t = self.seg_len;
        let mut m = Vec::with_capacity(self.groups * self.segments * t * t);
        for seg in 0..self.groups * self.segments {
            for q in 0..t {
                for k in 0..t {
                    m.push(self.valid(seg, k) && (!self.causal || k <= q));
                }
            }
        }
        Some(m)
    }

    fn video_mask(&self) -> Option<Vec<bool>> {
        if !self.needs_mask() {
            return None;
        }
        let (s, t) = (self.segments, self.seg_len);
        let mut m = Vec::with_capacity(self.groups * (s * t) * (s * t));
        for gi in 0..self.groups {
            for qs in 0..s {
                for qt in 0..t {
                    for ks in 0..s {
                        for kt in 0..t {
                            let seg = gi * s + ks;
                            let causal_ok = !self.causal || ks != qs || kt <= qt;
                            m.push(self.valid(seg, kt) && causal_ok);
                        }
                    }
                }
            }
        }
        Some(m)
    }

    fn fusion_mask(&self) -> Option<Vec<bool>> {
        self.lengths.as_ref()?;
        let (s, t) = (self.segments, self.seg_len);
        let mut m = Vec::with_capacity(self.groups * s * s * t);
        for gi in 0..self.groups {
            for _q in 0..s {
                for ks in 0..s {
                    for kt in 0..t {
                        m.push(self.valid(gi * s + ks, kt));
                    }
                }
            }
        }
        Some(m)
    }
}

/// Multi-head scaled dot-product attention over `groups` independent sequences.
/// `q: [groups*tq, d]`, `k`/`v`: `[groups*tk, d]`; the mask is `[groups, tq, tk]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    groups: usize,
    tq: usize,
    tk: usize,
    heads: usize,
    mask: Option<&[bool]>,
    meter: Option<&CostMeter>,
) -> Result<Var> {
    let d = g.shape(q)[1];
    let dh = d / heads;
    let split = |g: &mut Graph, x: Var, t: usize| -> Result<Var> {
        let x = g.reshape(x, &[groups, t, heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[groups * heads, t, dh])
    };
    let qh = split(g, q, tq)?;
    let kh = split(g, k, tk)?;
    let vh = split(g, v, tk)?;
    let scores = g.matmul_t(qh, kh, false, true)?;
    if let Some(m) = meter {
        m.add((groups * tq * tk) as u64);
    }
    let head_mask = mask.map(|m| {
        let per = tq * tk;
        let mut out = Vec::with_capacity(groups * heads * per);
        for gi in 0..groups {
            for _ in 0..heads {
                out.extend_from_slice(&m[gi * per..(gi + 1) * per]);
            }
        }
        out
    });
    let probs = g.softmax_masked(scores, 1.0 / (dh as f64).sqrt(), head_mask.as_deref())?;
    let out = g.matmul(probs, vh)?;
    let out = g.reshape(out, &[groups, heads, tq, dh])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    g.reshape(out, &[groups * tq, d])
}

/// Per-call options for a block forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BlockCtx<'a> {
    pub heads: usize,
    pub meter: Option<&'a CostMeter>,
}

/// One pre-norm block: `x + attn(ln1 x)`, then `x + mlp(ln2 x)`.
pub fn block_forward(
    g: &mut Graph,
    x: Var,
    layout: &TokenLayout,
    layer: &LayerVars,
    scheme: AttentionScheme,
    ctx: BlockCtx<'_>,
) -> Result<Var> {
    let w = &layer.block;
    if g.shape(x)[0] != layout.rows() {
        return Err(Error::Shape(format!("block input has {} rows, layout {}", g.shape(x)[0], layout.rows())));
    }
    let h = g.layer_norm(x, w.ln1_gamma, w.ln1_beta)?;
    let q = lora_linear(g, h, w.wq, w.bq, layer.lora_q)?;
    let k = lora_linear(g, h, w.wk, w.bk, None)?;
    let v = lora_linear(g, h, w.wv, w.bv, layer.lora_v)?;
    let (s, t) = (layout.segments, layout.seg_len);

    let attn = match scheme {
        AttentionScheme::ImageLevel => {
            let mask = layout.image_mask();
            let a = attend(g, q, k, v, layout.groups * s, t, t, ctx.heads, mask.as_deref(), ctx.meter)?;
            out_proj(g, a, w)?
        }
        AttentionScheme::VideoLevel => {
            let mask = layout.video_mask();
            let a = attend(g, q, k, v, layout.groups, s * t, s * t, ctx.heads, mask.as_deref(), ctx.meter)?;
            out_proj(g, a, w)?
        }
        AttentionScheme::IvFusion | AttentionScheme::IvFusionNoAdapter => {
            let mask = layout.image_mask();
            let b1 = attend(g, q, k, v, layout.groups * s, t, t, ctx.heads, mask.as_deref(), ctx.meter)?;
            let b1 = out_proj(g, b1, w)?;
            let rows = layout.summary_rows();
            let qc = g.select_rows(q, &rows)?;
            let fmask = layout.fusion_mask();
            let b2 = attend(g, qc, k, v, layout.groups, s, s * t, ctx.heads, fmask.as_deref(), ctx.meter)?;
            let c2 = out_proj(g, b2, w)?;
            let c1 = g.select_rows(b1, &rows)?;
            let fused = match (scheme, layer.adapter) {
                (AttentionScheme::IvFusion, Some(a)) => {
                    let delta = adapter(g, c1, a)?;
                    g.add(c2, delta)?
                }
                (AttentionScheme::IvFusion, None) => c2,
                _ => {
                    let sum = g.add(c1, c2)?;
                    g.scale(sum, 0.5)
                }
            };
            g.scatter_rows(b1, fused, &rows)?
        }
    };
    let x = g.add(x, attn)?;
    let h = g.layer_norm(x, w.ln2_gamma, w.ln2_beta)?;
    let m = g.linear(h, w.fc_w)?;
    let m = g.add_row(m, w.fc_b)?;
    let m = g.gelu(m);
    let m = g.linear(m, w.proj_w)?;
    let m = g.add_row(m, w.proj_b)?;
    g.add(x, m)
}

fn out_proj(g: &mut Graph, a: Var, w: &BlockVars) -> Result<Var> {
    let o = g.linear(a, w.wo)?;
    g.add_row(o, w.bo)
}

/// Exact per-head query-key score count of one layer over one video.
pub fn attention_cost(scheme: AttentionScheme, frames: usize, patches: usize) -> u64 {
    let (f, t) = (frames as u64, patches as u64 + 1);
    match scheme {
        AttentionScheme::ImageLevel => f * t * t,
        AttentionScheme::VideoLevel => (f * t) * (f * t),
        AttentionScheme::IvFusion | AttentionScheme::IvFusionNoAdapter => f * t * t + f * (f * t),
    }
}

/// Runs one block of `scheme` on a random video and reports the instrumented
/// score count.
pub fn measure_attention_cost(scheme: AttentionScheme, frames: usize, patches: usize) -> Result<u64> {
    use rand::SeedableRng;
    let d = 4;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let layer = LayerParams {
        block: BlockWeights::random(d, 1, &mut rng),
        heads: 1,
        lora: None,
        adapter: Some(FusionAdapter::new(Tensor::randn([d, 1], 1.0, &mut rng), Tensor::zeros([1, d]))?),
    };
    let x = FrameTokens::new(Tensor::randn([frames, patches + 1, d], 1.0, &mut rng))?;
    let meter = CostMeter::new();
    layer.apply(&x, scheme, Some(&meter))?;
    Ok(meter.get())
}

/// Per-frame token grid `[F, N+1, D]`; token 0 of each frame is its global token.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTokens(Tensor);

impl FrameTokens {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.rank() != 3 || tokens.shape().contains(&0) {
            return Err(Error::Shape(format!("frame tokens must be [F, N+1, D], got {:?}", tokens.shape())));
        }
        Ok(Self(tokens))
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Global token of frame `f`.
    pub fn cls(&self, f: usize) -> &[f64] {
        let (t, d) = (self.tokens_per_frame(), self.width());
        &self.0.data()[f * t * d..f * t * d + d]
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        let n = self.tokens_per_frame() * self.width();
        &self.0.data()[f * n..(f + 1) * n]
    }
}

/// Low-rank factors for the query and value projections of one layer.
#[derive(Clone, Debug)]
pub struct LoraFactors {
    pub q_down: Tensor,
    pub q_up: Tensor,
    pub v_down: Tensor,
    pub v_up: Tensor,
    pub scaling: f64,
}

/// Self-contained parameters of one layer, for direct (non-batched) use.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub block: BlockWeights,
    pub heads: usize,
    pub lora: Option<LoraFactors>,
    pub adapter: Option<FusionAdapter>,
}

impl LayerParams {
    pub fn bind(&self, g: &mut Graph) -> LayerVars {
        let block = self.block.bind(g);
        let (lora_q, lora_v) = match &self.lora {
            Some(l) => {
                let mut c = |t: &Tensor| g.constant(t.clone());
                let q = LoraVars { down: c(&l.q_down), up: c(&l.q_up), scaling: l.scaling };
                let v = LoraVars { down: c(&l.v_down), up: c(&l.v_up), scaling: l.scaling };
                (Some(q), Some(v))
            }
            None => (None, None),
        };
        let adapter = self
            .adapter
            .as_ref()
            .map(|a| AdapterVars { down: g.constant(a.down.clone()), up: g.constant(a.up.clone()) });
        LayerVars { block, lora_q, lora_v, adapter }
    }

    pub fn apply(&self, x: &FrameTokens, scheme: AttentionScheme, meter: Option<&CostMeter>) -> Result<FrameTokens> {
        if x.width() != self.block.width() {
            return Err(Error::Shape(format!("token width {} vs layer width {}", x.width(), self.block.width())));
        }
        let (f, t, d) = (x.frames(), x.tokens_per_frame(), x.width());
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let input = g.constant(x.tensor().reshape([f * t, d])?);
        let layout = TokenLayout::frames(1, f, t);
        let y = block_forward(&mut g, input, &layout, &vars, scheme, BlockCtx { heads: self.heads, meter })?;
        FrameTokens::new(g.value(y).reshape([f, t, d])?)
    }
}

/// Self-attention within each frame, then the block MLP.
pub fn image_level_attention(x: &FrameTokens, layer: &LayerParams) -> Result<FrameTokens> {
    layer.apply(x, AttentionScheme::ImageLevel, None)
}

/// Self-attention across all frames' tokens jointly, then the block MLP.
pub fn video_level_attention(x: &FrameTokens, layer: &LayerParams) -> Result<FrameTokens> {
    layer.apply(x, AttentionScheme::VideoLevel, None)
}

/// Per-frame attention plus a cross-frame branch for global tokens, merged by the adapter.
pub fn ivfusion_attention(x: &FrameTokens, layer: &LayerParams) -> Result<FrameTokens> {
    layer.apply(x, AttentionScheme::IvFusion, None)
}
