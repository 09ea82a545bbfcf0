#![allow(dead_code)]

pub mod oracle;

use discovla_core::alignment::{fine_grained_image_similarity, paired_image_similarity, SimLevel, SimilarityMatrix};
use discovla_core::encoders::{
    AttentionScheme, BlockWeights, CostMeter, FrameTokens, FusionAdapter, LayerParams, LoraFactors,
};
use discovla_core::retrieval::{dual_softmax_postprocess, rank_and_metrics, ranks, Direction};
use discovla_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use oracle::Rows;

pub const ORACLE_TOL: f64 = 1e-10;
pub const INSTANCES: usize = 100;

/// Largest absolute deviation seen and whether every discrete check held.
#[derive(Clone, Copy, Debug, Default)]
pub struct Check {
    pub instances: usize,
    pub max_err: f64,
    pub exact: bool,
}

impl Check {
    fn new() -> Self {
        Self { instances: 0, max_err: 0.0, exact: true }
    }

    fn err(&mut self, e: f64) {
        self.max_err = if e.is_nan() { f64::INFINITY } else { self.max_err.max(e) };
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.exact && self.max_err <= tol && self.instances >= INSTANCES
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], sd: f64) -> Tensor {
    Tensor::randn(shape.to_vec(), sd, rng)
}

pub fn random_layer(rng: &mut ChaCha8Rng, d: usize, heads: usize, rank: usize) -> LayerParams {
    let block = BlockWeights::random(d, 2, rng);
    let lora = Some(LoraFactors {
        q_down: randn(rng, &[rank, d], 0.5),
        q_up: randn(rng, &[d, rank], 0.5),
        v_down: randn(rng, &[rank, d], 0.5),
        v_up: randn(rng, &[d, rank], 0.5),
        scaling: rng.random_range(0.5..2.0),
    });
    let adapter = Some(FusionAdapter::new(randn(rng, &[d, rank], 0.5), randn(rng, &[rank, d], 0.5)).unwrap());
    LayerParams { block, heads, lora, adapter }
}

fn rows_of(t: &Tensor) -> Rows {
    t.data().chunks(t.last_dim()).map(<[f64]>::to_vec).collect()
}

fn max_diff(a: &Rows, b: &Rows) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Layer outputs and score counts against the loop oracle.
pub fn attention_check(scheme: AttentionScheme, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Check::new();
    for _ in 0..INSTANCES {
        let frames = rng.random_range(1..=4);
        let t = rng.random_range(1..=4);
        let heads = [1, 2][rng.random_range(0..2)];
        let d = heads * rng.random_range(2..=4);
        let rank = rng.random_range(1..=3);
        let layer = random_layer(&mut rng, d, heads, rank);
        let x = randn(&mut rng, &[frames, t, d], 1.0);
        let meter = CostMeter::new();
        let got = layer.apply(&FrameTokens::new(x.clone()).unwrap(), scheme, Some(&meter)).unwrap();
        let (want, count) = oracle::block(&rows_of(&x), frames, t, &layer, scheme);
        c.err(max_diff(&rows_of(got.tensor()), &want));
        c.exact &= meter.get() == count;
        c.instances += 1;
    }
    c
}

fn unit_features(rng: &mut ChaCha8Rng, b: usize, f: usize, e: usize) -> (Tensor, Vec<Rows>) {
    let mut rows: Vec<Rows> = Vec::with_capacity(b);
    for _ in 0..b {
        let mut group = Vec::with_capacity(f);
        for _ in 0..f {
            let v: Vec<f64> = (0..e).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            group.push(v.iter().map(|x| x / n).collect());
        }
        rows.push(group);
    }
    let flat: Vec<f64> = rows.iter().flatten().flatten().copied().collect();
    (Tensor::new([b, f, e], flat).unwrap(), rows)
}

/// Fine-grained and paired similarity against enumeration.
pub fn similarity_check(seed: u64) -> (Check, Check) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut fine, mut pair) = (Check::new(), Check::new());
    for _ in 0..INSTANCES {
        let f = rng.random_range(1..=5);
        let e = rng.random_range(2..=6);
        let (bt, bv) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let (t, tr) = unit_features(&mut rng, bt, f, e);
        let (v, vr) = unit_features(&mut rng, bv, f, e);
        fine.err(max_diff(&rows_of(&fine_grained_image_similarity(&t, &v).unwrap().values), &oracle::fine_grained(&tr, &vr)));
        pair.err(max_diff(&rows_of(&paired_image_similarity(&t, &v).unwrap().values), &oracle::paired(&tr, &vr)));
        fine.instances += 1;
        pair.instances += 1;
    }
    (fine, pair)
}

fn random_sim(rng: &mut ChaCha8Rng, nt: usize, nv: usize, ties: bool) -> Rows {
    (0..nt)
        .map(|_| (0..nv).map(|_| if ties { f64::from(rng.random_range(0..3)) } else { rng.random_range(-1.0..1.0) }).collect())
        .collect()
}

fn matrix(rows: &Rows) -> SimilarityMatrix {
    let flat = rows.iter().flatten().copied().collect();
    SimilarityMatrix::new(Tensor::new([rows.len(), rows[0].len()], flat).unwrap(), SimLevel::Video).unwrap()
}

/// Ranks and recall/mean-rank metrics against a sort-based oracle, ties included.
pub fn ranking_check(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Check::new();
    for k in 0..INSTANCES {
        let n = rng.random_range(1..=15);
        let sim = random_sim(&mut rng, n, n, k % 2 == 0);
        let m = matrix(&sim);
        for (dir, text) in [(Direction::T2v, true), (Direction::V2t, false)] {
            let want = oracle::sort_ranks(&sim, text);
            c.exact &= ranks(&m, dir).unwrap() == want;
            let got = rank_and_metrics(&m, dir).unwrap();
            let [r1, r5, r10, mnr] = oracle::metrics(&want);
            let errs = [got.r1 - r1, got.r5 - r5, got.r10 - r10, got.mnr - mnr, got.r_sum - (r1 + r5 + r10)];
            errs.iter().for_each(|e| c.err(e.abs()));
        }
        c.instances += 1;
    }
    c
}

/// Dual-softmax reweighting against direct summation, both directions.
pub fn dsl_check(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Check::new();
    for _ in 0..INSTANCES {
        let (nt, nv) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let sim = random_sim(&mut rng, nt, nv, false);
        let temp = rng.random_range(0.05..2.0);
        for (dir, text) in [(Direction::T2v, true), (Direction::V2t, false)] {
            let got = dual_softmax_postprocess(&matrix(&sim), temp, dir).unwrap();
            c.err(max_diff(&rows_of(&got.values), &oracle::dsl(&sim, temp, text)));
        }
        c.instances += 1;
    }
    c
}
