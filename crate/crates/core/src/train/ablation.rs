use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::run::{prepare_corpus, train};
use crate::encoders::count_trainable_params;
use crate::error::{Error, Result};
use crate::retrieval::RetrievalMetrics;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub preset: String,
    pub trainable_params: usize,
    pub t2v: RetrievalMetrics,
    pub v2t: RetrievalMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, preset: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.preset == preset)
    }

    /// Fixed-width text table, one line per preset.
    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<20} {:>10} {:>7} {:>7} {:>7} {:>7} {:>8} {:>7} {:>8}",
            "preset", "params", "R@1", "R@5", "R@10", "MnR", "R@sum", "v2t R@1", "v2t sum"
        )
        .expect("writing to a String");
        for r in &self.rows {
            writeln!(
                out,
                "{:<20} {:>10} {:>7.1} {:>7.1} {:>7.1} {:>7.1} {:>8.1} {:>7.1} {:>8.1}",
                r.preset, r.trainable_params, r.t2v.r1, r.t2v.r5, r.t2v.r10, r.t2v.mnr, r.t2v.r_sum, r.v2t.r1, r.v2t.r_sum
            )
            .expect("writing to a String");
        }
        out
    }
}

/// Trains every preset on the same corpus and seed, varying only component choices.
pub fn run_ablation(base: &RunConfig, presets: &[&str], seed: u64) -> Result<AblationTable> {
    if presets.is_empty() {
        return Err(Error::EmptyInput("no presets to compare".into()));
    }
    let mut base = base.clone();
    base.seed = seed;
    let (train_set, test_set) = prepare_corpus(&base)?;
    let mut rows = Vec::with_capacity(presets.len());
    for &name in presets {
        let mut cfg = base.clone();
        cfg.apply_preset(name)?;
        let out = train(&cfg, &train_set, &test_set)?;
        log::info!("{name}: t2v R@1 {:.1}", out.t2v.r1);
        rows.push(AblationRow {
            preset: name.to_owned(),
            trainable_params: count_trainable_params(&cfg.model, cfg.flags()),
            t2v: out.t2v,
            v2t: out.v2t,
        });
    }
    Ok(AblationTable { seed, rows })
}
