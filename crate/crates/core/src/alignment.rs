//! Similarity matrices, contrastive alignment, pseudo image-level similarity
//! and alignment distillation.
//!
//! Every loss has a graph form used in training and a tensor form that
//! evaluates the same graph on constants.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Allowed deviation of a feature row norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimLevel {
    Video,
    Image,
}

/// Text-by-video score grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    /// `[N_t, N_v]`
    pub values: Tensor,
    pub level: SimLevel,
}

impl SimilarityMatrix {
    pub fn new(values: Tensor, level: SimLevel) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::Shape(format!("similarity matrix must be 2-D, got {:?}", values.shape())));
        }
        if !values.all_finite() {
            return Err(Error::NonFinite("similarity matrix".into()));
        }
        Ok(Self { values, level })
    }

    pub fn texts(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn videos(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_square(&self) -> bool {
        self.texts() == self.videos()
    }

    pub fn get(&self, text: usize, video: usize) -> f64 {
        self.values.get(&[text, video])
    }

    /// The same scores indexed video-by-text.
    pub fn transposed(&self) -> Self {
        Self { values: self.values.transpose2().expect("2-D"), level: self.level }
    }

    fn require_square(&self, what: &str) -> Result<usize> {
        if !self.is_square() {
            return Err(Error::Shape(format!("{what} needs a square matrix, got {:?}", self.values.shape())));
        }
        Ok(self.texts())
    }
}

/// How the pseudo image-level similarity is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// Max over the other side's items, then mean, averaged over both directions.
    FineGrained,
    /// Index-matched frame and caption pairs only.
    Paired,
    /// Mean of features over frames on each side, then one inner product.
    VideoLevelAvg,
    /// Image-level alignment disabled.
    None,
}

impl SimilarityMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::FineGrained => "fine_grained",
            Self::Paired => "paired",
            Self::VideoLevelAvg => "video_level_avg",
            Self::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fine_grained" => Ok(Self::FineGrained),
            "paired" => Ok(Self::Paired),
            "video_level_avg" => Ok(Self::VideoLevelAvg),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!(
                "unknown similarity mode {s:?} (expected fine_grained, paired, video_level_avg or none)"
            ))),
        }
    }
}

impl fmt::Display for SimilarityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    for (i, r) in t.rows().enumerate() {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !((n - 1.0).abs() <= UNIT_NORM_TOL) {
            return Err(Error::Contract(format!("{what} row {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Domain(format!("temperature must be positive and finite, got {tau}")));
    }
    Ok(())
}

// ---- graph forms ---------------------------------------------------------

/// `t · vᵀ` for `t: [N_t, E]`, `v: [N_v, E]`.
pub fn similarity_graph(g: &mut Graph, t: Var, v: Var) -> Result<Var> {
    g.matmul_t(t, v, false, true)
}

/// Image-level similarity `[B_t, B_v]` from caption features `[B_t*F, E]`
/// and frame features `[B_v*F, E]`.
pub fn image_similarity_graph(g: &mut Graph, mode: SimilarityMode, t_img: Var, v_img: Var, frames: usize) -> Result<Var> {
    let (nt, e) = dims2(g, t_img)?;
    let (nv, e2) = dims2(g, v_img)?;
    if e != e2 {
        return Err(Error::Shape(format!("feature widths differ: {e} vs {e2}")));
    }
    if frames == 0 || nt % frames != 0 || nv % frames != 0 {
        return Err(Error::Shape(format!("{nt} caption rows and {nv} frame rows do not split into groups of {frames}")));
    }
    let (bt, bv, f) = (nt / frames, nv / frames, frames);
    match mode {
        SimilarityMode::FineGrained => {
            let s = g.matmul_t(t_img, v_img, false, true)?;
            let s = g.reshape(s, &[bt, f, bv, f])?;
            // (i, j, caption n, frame m)
            let by_caption = g.permute(s, &[0, 2, 1, 3])?;
            let t2v = g.max_last(by_caption);
            let t2v = g.mean_last(t2v);
            // (i, j, frame m, caption n)
            let by_frame = g.permute(s, &[0, 2, 3, 1])?;
            let v2t = g.max_last(by_frame);
            let v2t = g.mean_last(v2t);
            let both = g.add(t2v, v2t)?;
            Ok(g.scale(both, 0.5))
        }
        SimilarityMode::Paired => {
            let t = g.reshape(t_img, &[bt, f, e])?;
            let t = g.permute(t, &[1, 0, 2])?;
            let v = g.reshape(v_img, &[bv, f, e])?;
            let v = g.permute(v, &[1, 0, 2])?;
            let s = g.matmul_t(t, v, false, true)?;
            let s = g.permute(s, &[1, 2, 0])?;
            Ok(g.mean_last(s))
        }
        SimilarityMode::VideoLevelAvg => {
            let t = g.reshape(t_img, &[bt, f, e])?;
            let t = g.permute(t, &[0, 2, 1])?;
            let t = g.mean_last(t);
            let v = g.reshape(v_img, &[bv, f, e])?;
            let v = g.permute(v, &[0, 2, 1])?;
            let v = g.mean_last(v);
            g.matmul_t(t, v, false, true)
        }
        SimilarityMode::None => Err(Error::Config("image-level similarity requested with mode none".into())),
    }
}

fn dims2(g: &Graph, v: Var) -> Result<(usize, usize)> {
    match g.shape(v) {
        &[a, b] => Ok((a, b)),
        s => Err(Error::Shape(format!("expected a matrix, got {s:?}"))),
    }
}

fn diag_mean(g: &mut Graph, x: Var, n: usize) -> Result<Var> {
    let eye = g.constant(Tensor::eye(n));
    let d = g.mul(x, eye)?;
    let s = g.sum(d);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// Symmetric InfoNCE over a square similarity `sim` with logits `sim * inv_tau`.
pub fn contrastive_loss_graph(g: &mut Graph, sim: Var, inv_tau: Var) -> Result<Var> {
    let (n, m) = dims2(g, sim)?;
    if n != m {
        return Err(Error::Shape(format!("contrastive loss needs a square matrix, got [{n}, {m}]")));
    }
    let logits = g.mul_scalar(sim, inv_tau)?;
    let rows = g.log_softmax(logits);
    let t2v = diag_mean(g, rows, n)?;
    let lt = g.transpose(logits)?;
    let cols = g.log_softmax(lt);
    let v2t = diag_mean(g, cols, n)?;
    let both = g.add(t2v, v2t)?;
    Ok(g.scale(both, -0.5))
}

fn kl_rows(g: &mut Graph, teacher: Var, student: Var) -> Result<Var> {
    let log_p = g.log_softmax(teacher);
    let p = g.exp(log_p);
    let log_q = g.log_softmax(student);
    let diff = g.sub(log_p, log_q)?;
    let w = g.mul(p, diff)?;
    let per_row = g.sum_last(w);
    Ok(g.mean(per_row))
}

/// `½ (KL over rows + KL over columns)` of temperature softmaxes, teacher
/// `sim_img` against student `sim_vid`. With `detach_teacher` the teacher
/// contributes no gradient.
pub fn distill_kl_graph(g: &mut Graph, sim_img: Var, sim_vid: Var, inv_tau: Var, detach_teacher: bool) -> Result<Var> {
    if g.shape(sim_img) != g.shape(sim_vid) {
        return Err(Error::Shape(format!(
            "distillation matrices differ in shape: {:?} vs {:?}",
            g.shape(sim_img),
            g.shape(sim_vid)
        )));
    }
    dims2(g, sim_vid)?;
    let mut teacher = g.mul_scalar(sim_img, inv_tau)?;
    if detach_teacher {
        teacher = g.detach(teacher);
    }
    let student = g.mul_scalar(sim_vid, inv_tau)?;
    let rows = kl_rows(g, teacher, student)?;
    let tt = g.transpose(teacher)?;
    let st = g.transpose(student)?;
    let cols = kl_rows(g, tt, st)?;
    let both = g.add(rows, cols)?;
    Ok(g.scale(both, 0.5))
}

/// Loss terms on the graph. Disabled terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub video_align: Var,
    pub image_align: Option<Var>,
    pub distill: Option<Var>,
}

/// Weights and switches of the training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub detach_teacher: bool,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Domain(format!("loss weight {name} must be a nonnegative number, got {w}")));
            }
        }
        Ok(())
    }
}

/// `L_A(sim_vid) + α·L_A(sim_img) + β·KL`. A term whose weight is zero or
/// whose image-level matrix is absent is skipped entirely.
pub fn total_loss_graph(g: &mut Graph, sim_vid: Var, sim_img: Option<Var>, inv_tau: Var, w: LossWeights) -> Result<LossVars> {
    w.validate()?;
    let video_align = contrastive_loss_graph(g, sim_vid, inv_tau)?;
    let mut total = video_align;
    let mut image_align = None;
    let mut distill = None;
    if let Some(si) = sim_img {
        if w.alpha > 0.0 {
            let l = contrastive_loss_graph(g, si, inv_tau)?;
            let s = g.scale(l, w.alpha);
            total = g.add(total, s)?;
            image_align = Some(l);
        }
        if w.beta > 0.0 {
            let l = distill_kl_graph(g, si, sim_vid, inv_tau, w.detach_teacher)?;
            let s = g.scale(l, w.beta);
            total = g.add(total, s)?;
            distill = Some(l);
        }
    }
    Ok(LossVars { total, video_align, image_align, distill })
}

// ---- tensor forms ----------------------------------------------------------

/// Video-level similarity of unit text rows `[N_t, E]` and unit video rows `[N_v, E]`.
pub fn video_similarity(t_vid: &Tensor, v_vid: &Tensor) -> Result<SimilarityMatrix> {
    check_unit_rows(t_vid, "text feature")?;
    check_unit_rows(v_vid, "video feature")?;
    let mut g = Graph::new();
    let t = g.constant(t_vid.clone());
    let v = g.constant(v_vid.clone());
    let s = similarity_graph(&mut g, t, v)?;
    SimilarityMatrix::new(g.value(s).clone(), SimLevel::Video)
}

fn image_similarity(mode: SimilarityMode, t_img: &Tensor, v_img: &Tensor) -> Result<SimilarityMatrix> {
    let (&[bt, ft, et], &[bv, fv, ev]) = (t_img.shape(), v_img.shape()) else {
        return Err(Error::Shape(format!(
            "image-level features must be [B, F, E], got {:?} and {:?}",
            t_img.shape(),
            v_img.shape()
        )));
    };
    if ft != fv {
        return Err(Error::Arity { what: "captions per video (one per frame)", expected: fv, actual: ft });
    }
    if et != ev {
        return Err(Error::Shape(format!("feature widths differ: {et} vs {ev}")));
    }
    check_unit_rows(t_img, "caption feature")?;
    check_unit_rows(v_img, "frame feature")?;
    let mut g = Graph::new();
    let t = g.constant(t_img.reshape([bt * ft, et])?);
    let v = g.constant(v_img.reshape([bv * fv, ev])?);
    let s = image_similarity_graph(&mut g, mode, t, v, ft)?;
    SimilarityMatrix::new(g.value(s).clone(), SimLevel::Image)
}

/// Mean over captions of the best-matching frame, averaged with the mean
/// over frames of the best-matching caption. Inputs are `[B, F, E]`.
pub fn fine_grained_image_similarity(t_img: &Tensor, v_img: &Tensor) -> Result<SimilarityMatrix> {
    image_similarity(SimilarityMode::FineGrained, t_img, v_img)
}

/// Mean inner product of index-matched caption/frame pairs.
pub fn paired_image_similarity(t_img: &Tensor, v_img: &Tensor) -> Result<SimilarityMatrix> {
    image_similarity(SimilarityMode::Paired, t_img, v_img)
}

/// Inner product of the frame-averaged caption and frame features.
pub fn video_level_avg_similarity(t_img: &Tensor, v_img: &Tensor) -> Result<SimilarityMatrix> {
    image_similarity(SimilarityMode::VideoLevelAvg, t_img, v_img)
}

fn eval_scalar(f: impl FnOnce(&mut Graph, Var) -> Result<Var>, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let mut g = Graph::new();
    let inv = g.constant(Tensor::scalar(1.0 / tau));
    let out = f(&mut g, inv)?;
    Ok(g.value(out).item())
}

/// Symmetric contrastive loss of a square matrix at temperature `tau`.
pub fn contrastive_alignment_loss(sim: &SimilarityMatrix, tau: f64) -> Result<f64> {
    sim.require_square("contrastive_alignment_loss")?;
    eval_scalar(
        |g, inv| {
            let s = g.constant(sim.values.clone());
            contrastive_loss_graph(g, s, inv)
        },
        tau,
    )
}

/// Distillation divergence of `sim_vid` from the image-level teacher `sim_img`.
pub fn align_distill_kl(sim_img: &SimilarityMatrix, sim_vid: &SimilarityMatrix, tau: f64) -> Result<f64> {
    eval_scalar(
        |g, inv| {
            let si = g.constant(sim_img.values.clone());
            let sv = g.constant(sim_vid.values.clone());
            distill_kl_graph(g, si, sv, inv, true)
        },
        tau,
    )
}

/// Scalar loss terms of one evaluation of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub video_align: f64,
    pub image_align: f64,
    pub distill: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    /// Combines precomputed terms.
    pub fn compose(video_align: f64, image_align: f64, distill: f64, alpha: f64, beta: f64) -> Result<Self> {
        LossWeights { alpha, beta, detach_teacher: true }.validate()?;
        let mut total = video_align;
        if alpha > 0.0 {
            total += alpha * image_align;
        }
        if beta > 0.0 {
            total += beta * distill;
        }
        Ok(Self { video_align, image_align, distill, total, alpha, beta })
    }

    /// Reads the terms back from an evaluated graph.
    pub fn from_graph(g: &Graph, vars: &LossVars, w: LossWeights) -> Self {
        let get = |v: Option<Var>| v.map(|v| g.value(v).item()).unwrap_or(0.0);
        Self {
            video_align: g.value(vars.video_align).item(),
            image_align: get(vars.image_align),
            distill: get(vars.distill),
            total: g.value(vars.total).item(),
            alpha: w.alpha,
            beta: w.beta,
        }
    }
}

/// Full objective on fixed similarity matrices. Every term is reported,
/// including those whose weight is zero.
pub fn total_loss(sim_vid: &SimilarityMatrix, sim_img: &SimilarityMatrix, tau: f64, alpha: f64, beta: f64) -> Result<LossBreakdown> {
    let n = sim_vid.require_square("total_loss")?;
    sim_img.require_square("total_loss")?;
    if sim_img.texts() != n {
        return Err(Error::Shape(format!(
            "video-level matrix is {n}x{n}, image-level is {0}x{0}",
            sim_img.texts()
        )));
    }
    LossWeights { alpha, beta, detach_teacher: true }.validate()?;
    let video_align = contrastive_alignment_loss(sim_vid, tau)?;
    let image_align = contrastive_alignment_loss(sim_img, tau)?;
    let distill = align_distill_kl(sim_img, sim_vid, tau)?;
    LossBreakdown::compose(video_align, image_align, distill, alpha, beta)
}
