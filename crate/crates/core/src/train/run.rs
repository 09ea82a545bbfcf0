use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Postprocess, RunConfig};
use super::optim::{cosine_lr, AdamW};
use crate::alignment::{
    image_similarity_graph, similarity_graph, total_loss_graph, LossBreakdown, LossVars, SimLevel, SimilarityMatrix,
};
use crate::data::{generate_synthetic_corpus, load_pseudo_captions, Batch, Batcher, Corpus};
use crate::encoders::{Mode, Model};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor};
use crate::retrieval::{dual_softmax_postprocess, rank_and_metrics, Direction, RetrievalMetrics};

/// Header of the loss trace CSV.
pub const TRACE_HEADER: &str = "step,loss_total,loss_align_vid,loss_align_img,loss_kl,lr";

/// Videos or captions encoded per graph during evaluation.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        let l = &r.loss;
        writeln!(out, "{},{},{},{},{},{}", r.step, l.total, l.video_align, l.image_align, l.distill, r.lr)
            .expect("writing to a String");
    }
    out
}

/// Held-out retrieval after one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub t2v: RetrievalMetrics,
    pub v2t: RetrievalMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Trainable tensors plus the configuration that rebuilds everything else.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub config_hash: String,
    pub step: usize,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(config: &RunConfig, model: &Model, step: usize) -> Self {
        let params = model
            .params
            .ids()
            .map(|id| {
                let t = model.params.get(id);
                NamedTensor { name: model.params.name(id).to_owned(), shape: t.shape().to_vec(), data: t.data().to_vec() }
            })
            .collect();
        Self { config: config.clone(), config_hash: config.model_hash(), step, params }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Rebuilds the model: fresh backbone from the seed, stored trainable tensors.
    pub fn restore(&self) -> Result<Model> {
        if self.config.model_hash() != self.config_hash {
            return Err(Error::Compatibility("config hash does not match the stored configuration".into()));
        }
        let c = &self.config;
        let mut model = Model::new(c.model.clone(), c.architecture(), c.backbone_seed(), c.init_seed())?;
        if model.params.len() != self.params.len() {
            return Err(Error::Compatibility(format!(
                "checkpoint holds {} tensors, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for nt in &self.params {
            let id = model
                .params
                .find(&nt.name)
                .ok_or_else(|| Error::Compatibility(format!("unknown tensor {:?}", nt.name)))?;
            let p = model.params.get_mut(id);
            if p.shape() != nt.shape.as_slice() {
                return Err(Error::Compatibility(format!("tensor {:?} has shape {:?}, expected {:?}", nt.name, nt.shape, p.shape())));
            }
            *p = Tensor::new(nt.shape.clone(), nt.data.clone())?;
        }
        Ok(model)
    }
}

/// Builds the model a configuration describes, untrained.
pub fn build_model(config: &RunConfig) -> Result<Model> {
    config.validate()?;
    Model::new(config.model.clone(), config.architecture(), config.backbone_seed(), config.init_seed())
}

/// Generates or loads the corpus and splits it into training and held-out parts.
pub fn prepare_corpus(config: &RunConfig) -> Result<(Corpus, Corpus)> {
    let mut corpus = match &config.corpus_path {
        Some(p) => Corpus::load(p)?,
        None => generate_synthetic_corpus(&config.synthetic_params(), &config.model)?,
    };
    if let Some(p) = &config.pseudo_captions_path {
        let caps = load_pseudo_captions(p, corpus.frames)?;
        corpus.attach_pseudo_captions(&caps)?;
    }
    corpus.check_compatible(&config.model)?;
    corpus.split(config.train_size)
}

/// The training objective for one batch on `g`.
pub fn objective_graph(model: &Model, g: &mut Graph, mode: Mode<'_>, batch: &Batch, config: &RunConfig) -> Result<LossVars> {
    let video = model.encode_video_graph(g, mode, &batch.frames)?;
    let t_vid = model.encode_text_graph(g, mode, &batch.captions, 1)?;
    let inv_tau = model.logit_scale_var(g, mode);
    let sim_vid = similarity_graph(g, t_vid, video.v_vid)?;
    let sim_img = if config.needs_pseudo_captions() {
        let pseudo = batch
            .pseudo_captions
            .as_ref()
            .ok_or_else(|| Error::EmptyInput("training batch lacks pseudo captions".into()))?;
        let f = model.config.frames;
        let t_img = model.encode_text_graph(g, mode, pseudo, f)?;
        Some(image_similarity_graph(g, config.similarity, t_img, video.v_img, f)?)
    } else {
        None
    };
    total_loss_graph(g, sim_vid, sim_img, inv_tau, config.loss_weights())
}

/// Unit text and video features `[n, d_embed]` of every record.
pub fn encode_corpus(model: &Model, corpus: &Corpus) -> Result<(Tensor, Tensor)> {
    let e = model.config.d_embed;
    let mut texts = Vec::with_capacity(corpus.len() * e);
    let mut videos = Vec::with_capacity(corpus.len() * e);
    let positions: Vec<usize> = (0..corpus.len()).collect();
    for chunk in positions.chunks(EVAL_CHUNK) {
        let batch = Batch::assemble(corpus, chunk)?;
        let mut g = Graph::new();
        let bound = model.params.bind_frozen(&mut g);
        let mode = Mode::With(&bound);
        let v = model.encode_video_graph(&mut g, mode, &batch.frames)?;
        let t = model.encode_text_graph(&mut g, mode, &batch.captions, 1)?;
        videos.extend_from_slice(g.value(v.v_vid).data());
        texts.extend_from_slice(g.value(t).data());
    }
    Ok((Tensor::new([corpus.len(), e], texts)?, Tensor::new([corpus.len(), e], videos)?))
}

/// Text-by-video similarity of a whole corpus.
pub fn corpus_similarity(model: &Model, corpus: &Corpus) -> Result<SimilarityMatrix> {
    let (t, v) = encode_corpus(model, corpus)?;
    let mut g = Graph::new();
    let tv = g.constant(t);
    let vv = g.constant(v);
    let s = similarity_graph(&mut g, tv, vv)?;
    SimilarityMatrix::new(g.value(s).clone(), SimLevel::Video)
}

/// Both retrieval directions from a similarity matrix.
pub fn metrics_from_similarity(
    sim: &SimilarityMatrix,
    postprocess: Postprocess,
    dsl_temperature: f64,
) -> Result<(RetrievalMetrics, RetrievalMetrics)> {
    let pick = |dir: Direction| -> Result<RetrievalMetrics> {
        match postprocess {
            Postprocess::None => rank_and_metrics(sim, dir),
            Postprocess::Dsl => rank_and_metrics(&dual_softmax_postprocess(sim, dsl_temperature, dir)?, dir),
        }
    };
    Ok((pick(Direction::T2v)?, pick(Direction::V2t)?))
}

pub fn evaluate(
    model: &Model,
    corpus: &Corpus,
    postprocess: Postprocess,
    dsl_temperature: f64,
) -> Result<(RetrievalMetrics, RetrievalMetrics)> {
    metrics_from_similarity(&corpus_similarity(model, corpus)?, postprocess, dsl_temperature)
}

/// Restores `checkpoint` and evaluates it on `corpus`.
pub fn run_evaluation(checkpoint: &Checkpoint, corpus: &Corpus, postprocess: Postprocess) -> Result<(RetrievalMetrics, RetrievalMetrics)> {
    corpus
        .check_compatible(&checkpoint.config.model)
        .map_err(|e| Error::Compatibility(format!("corpus does not fit the checkpoint: {e}")))?;
    let model = checkpoint.restore()?;
    evaluate(&model, corpus, postprocess, checkpoint.config.dsl_temperature)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<TraceRow>,
    pub epochs: Vec<EpochReport>,
    pub t2v: RetrievalMetrics,
    pub v2t: RetrievalMetrics,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn checkpoint(&self, config: &RunConfig) -> Checkpoint {
        Checkpoint::from_model(config, &self.model, self.steps)
    }
}

/// AdamW on the trainable tensors over `config.epochs` passes of `train`,
/// reporting held-out retrieval on `test` after every epoch.
pub fn train(config: &RunConfig, train: &Corpus, test: &Corpus) -> Result<TrainOutcome> {
    let model = build_model(config)?;
    train_from(config, model, train, test)
}

/// As [`train`], starting from an existing model.
pub fn train_from(config: &RunConfig, mut model: Model, train: &Corpus, test: &Corpus) -> Result<TrainOutcome> {
    config.validate()?;
    train.check_compatible(&config.model)?;
    let batcher = Batcher::new(train.len(), config.batch_size, config.shuffle_seed(), true)?;
    let total = batcher.batches_per_epoch() * config.epochs;
    let mut opt = AdamW::new(&model.params, config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay);
    let weights = config.loss_weights();
    let mut trace = Vec::with_capacity(total);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut last_finite: Option<(usize, f64)> = None;
    let mut step = 0;
    for epoch in 0..config.epochs {
        for batch in batcher.epoch(train, epoch) {
            let batch = batch?;
            let lr = cosine_lr(config.lr, step, total);
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g);
            let diverged = |step| Error::Divergence {
                step,
                last_finite_step: last_finite.map(|x| x.0),
                last_finite_loss: last_finite.map(|x| x.1),
            };
            let vars = match objective_graph(&model, &mut g, Mode::With(&bound), &batch, config) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => return Err(diverged(step)),
                Err(e) => return Err(e),
            };
            let loss = LossBreakdown::from_graph(&g, &vars, weights);
            if !loss.total.is_finite() {
                return Err(diverged(step));
            }
            let mut grads = g.backward(vars.total)?;
            let grads = bound.collect(&mut grads);
            if grads.iter().any(|t| !t.all_finite()) {
                return Err(diverged(step));
            }
            opt.step(&mut model.params, &grads, lr)?;
            last_finite = Some((step, loss.total));
            trace.push(TraceRow { step, loss, lr });
            step += 1;
        }
        let (t2v, v2t) = evaluate(&model, test, config.postprocess, config.dsl_temperature)?;
        log::info!(
            "epoch {}: loss {:.4}  t2v R@1 {:.1} R@sum {:.1}  v2t R@1 {:.1}",
            epoch + 1,
            trace.last().map(|r| r.loss.total).unwrap_or(f64::NAN),
            t2v.r1,
            t2v.r_sum,
            v2t.r1
        );
        epochs.push(EpochReport { epoch: epoch + 1, t2v, v2t });
    }
    let last = *epochs.last().expect("at least one epoch");
    Ok(TrainOutcome { model, trace, epochs, t2v: last.t2v, v2t: last.v2t, steps: step })
}

/// Machine-readable summary of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub preset: String,
    pub trainable_params: usize,
    pub steps: usize,
    pub t2v: RetrievalMetrics,
    pub v2t: RetrievalMetrics,
    pub epochs: Vec<EpochReport>,
}

pub const TRACE_FILE: &str = "loss_trace.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_FILE: &str = "config.txt";

/// Trains and writes the trace, checkpoint, metrics and resolved configuration
/// into `config.out_dir`.
pub fn run_training(config: &RunConfig) -> Result<(TrainOutcome, RunRecord)> {
    config.validate()?;
    let (train_set, test_set) = prepare_corpus(config)?;
    let outcome = train(config, &train_set, &test_set)?;
    let record = RunRecord {
        preset: config.preset.clone(),
        trainable_params: outcome.model.adaptation_param_count(),
        steps: outcome.steps,
        t2v: outcome.t2v,
        v2t: outcome.v2t,
        epochs: outcome.epochs.clone(),
    };
    let dir = &config.out_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(TRACE_FILE), trace_csv(&outcome.trace))?;
    outcome.checkpoint(config).save(&dir.join(CHECKPOINT_FILE))?;
    fs::write(dir.join(METRICS_FILE), serde_json::to_vec_pretty(&record)?)?;
    fs::write(dir.join(CONFIG_FILE), config.to_kv())?;
    Ok((outcome, record))
}
