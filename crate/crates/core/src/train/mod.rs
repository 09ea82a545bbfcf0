//! Training, evaluation, checkpoints and ablations.

mod ablation;
mod config;
mod optim;
mod run;

pub use ablation::{run_ablation, AblationRow, AblationTable};
pub use config::{Postprocess, RunConfig, PRESETS};
pub use optim::{cosine_lr, AdamW};
pub use run::{
    build_model, corpus_similarity, encode_corpus, evaluate, metrics_from_similarity, objective_graph, prepare_corpus,
    run_evaluation, run_training, train, train_from, trace_csv, Checkpoint, EpochReport, NamedTensor, RunRecord,
    TraceRow, TrainOutcome, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, TRACE_FILE, TRACE_HEADER,
};

#[cfg(test)]
mod tests;
