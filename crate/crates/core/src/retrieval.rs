//! Ranking metrics and dual-softmax re-ranking.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::alignment::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Text queries, rows of the matrix.
    T2v,
    /// Video queries, columns of the matrix.
    V2t,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Self::T2v => "t2v",
            Self::V2t => "v2t",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Recall percentages and mean rank for one direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub direction: Direction,
    pub queries: usize,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    /// Mean 1-based rank of the matched item.
    pub mnr: f64,
    pub r_sum: f64,
}

impl RetrievalMetrics {
    /// Aggregates 1-based ranks.
    pub fn from_ranks(direction: Direction, ranks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::EmptyInput("no queries to rank".into()));
        }
        let n = ranks.len() as f64;
        let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        let (r1, r5, r10) = (recall(1), recall(5), recall(10));
        Ok(Self {
            direction,
            queries: ranks.len(),
            r1,
            r5,
            r10,
            mnr: ranks.iter().sum::<usize>() as f64 / n,
            r_sum: r1 + r5 + r10,
        })
    }

    pub fn r_at(&self, k: usize) -> Option<f64> {
        match k {
            1 => Some(self.r1),
            5 => Some(self.r5),
            10 => Some(self.r10),
            _ => None,
        }
    }

    /// `key=value` lines, percentages to one decimal.
    pub fn to_kv(&self) -> String {
        let d = self.direction;
        format!(
            "{d}.queries={}\n{d}.r1={:.1}\n{d}.r5={:.1}\n{d}.r10={:.1}\n{d}.mnr={:.1}\n{d}.r_sum={:.1}\n",
            self.queries, self.r1, self.r5, self.r10, self.mnr, self.r_sum
        )
    }
}

/// 1-based rank of each query's matched item; equal scores rank the lower index first.
pub fn ranks(sim: &SimilarityMatrix, direction: Direction) -> Result<Vec<usize>> {
    if !sim.is_square() {
        return Err(Error::Shape(format!("ranking needs a square matrix, got {:?}", sim.values.shape())));
    }
    let n = sim.texts();
    let score = |q: usize, c: usize| match direction {
        Direction::T2v => sim.get(q, c),
        Direction::V2t => sim.get(c, q),
    };
    Ok((0..n)
        .map(|q| {
            let target = score(q, q);
            1 + (0..n).filter(|&c| c != q && (score(q, c) > target || (score(q, c) == target && c < q))).count()
        })
        .collect())
}

pub fn rank_and_metrics(sim: &SimilarityMatrix, direction: Direction) -> Result<RetrievalMetrics> {
    RetrievalMetrics::from_ranks(direction, &ranks(sim, direction)?)
}

/// Default temperature of [`dual_softmax_postprocess`].
pub const DSL_TEMPERATURE: f64 = 1.0;

/// Reweights each score by a softmax along the opposite axis: for text
/// queries every column is normalized over texts, for video queries every
/// row over videos.
pub fn dual_softmax_postprocess(sim: &SimilarityMatrix, temperature: f64, direction: Direction) -> Result<SimilarityMatrix> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Domain(format!("DSL temperature must be positive and finite, got {temperature}")));
    }
    let (nt, nv) = (sim.texts(), sim.videos());
    let mut out = sim.values.clone();
    let src = sim.values.data();
    let idx = |i: usize, j: usize| i * nv + j;
    let lines: Vec<Vec<usize>> = match direction {
        Direction::T2v => (0..nv).map(|j| (0..nt).map(|i| idx(i, j)).collect()).collect(),
        Direction::V2t => (0..nt).map(|i| (0..nv).map(|j| idx(i, j)).collect()).collect(),
    };
    for line in lines {
        let max = line.iter().map(|&k| src[k]).fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = line.iter().map(|&k| ((src[k] - max) / temperature).exp()).collect();
        let z: f64 = w.iter().sum();
        for (&k, wk) in line.iter().zip(w) {
            out.data_mut()[k] = src[k] * (wk / z);
        }
    }
    SimilarityMatrix::new(Tensor::new(sim.values.shape().to_vec(), out.into_data())?, sim.level)
}
