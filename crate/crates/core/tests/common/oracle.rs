//! Plain-loop reference implementations, written without the tape.

use discovla_core::encoders::{AttentionScheme, LayerParams};
use discovla_core::Tensor;

pub type Rows = Vec<Vec<f64>>;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x·Wᵀ (+ b)` with `W: [out, in]`.
fn lin(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    (0..out)
        .map(|o| {
            let row = &w.data()[o * inp..(o + 1) * inp];
            dot(x, row) + b.map_or(0.0, |b| b.data()[o])
        })
        .collect()
}

/// `x·M` with `M: [in, out]`.
fn right_mul(x: &[f64], m: &Tensor) -> Vec<f64> {
    let (inp, out) = (m.shape()[0], m.shape()[1]);
    (0..out).map(|o| (0..inp).map(|i| x[i] * m.data()[i * out + o]).sum()).collect()
}

fn layer_norm(x: &[f64], gamma: &Tensor, beta: &Tensor) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(j, v)| (v - mean) / sd * gamma.data()[j] + beta.data()[j]).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Multi-head attention of one query over a key set, counting every score.
fn attend_one(q: &[f64], keys: &[usize], k: &Rows, v: &Rows, heads: usize, counter: &mut u64) -> Vec<f64> {
    let d = q.len();
    let dh = d / heads;
    let mut out = vec![0.0; d];
    *counter += keys.len() as u64;
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        let scores: Vec<f64> = keys.iter().map(|&j| dot(&q[r.clone()], &k[j][r.clone()]) / (dh as f64).sqrt()).collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = w.iter().sum();
        for (wi, &j) in w.iter().zip(keys) {
            for c in r.clone() {
                out[c] += wi / z * v[j][c];
            }
        }
    }
    out
}

/// One transformer block over `frames` groups of `t` tokens. Returns the
/// output rows and the number of query-key scores evaluated.
pub fn block(x: &Rows, frames: usize, t: usize, layer: &LayerParams, scheme: AttentionScheme) -> (Rows, u64) {
    let w = &layer.block;
    let n = frames * t;
    assert_eq!(x.len(), n);
    let h: Rows = x.iter().map(|r| layer_norm(r, &w.ln1_gamma, &w.ln1_beta)).collect();
    let delta = |r: &[f64], down: &Tensor, up: &Tensor, s: f64| lin(&lin(r, down, None), up, None).iter().map(|x| s * x).collect::<Vec<_>>();
    let q: Rows = h
        .iter()
        .map(|r| {
            let base = lin(r, &w.wq, Some(&w.bq));
            match &layer.lora {
                Some(l) => add(&base, &delta(r, &l.q_down, &l.q_up, l.scaling)),
                None => base,
            }
        })
        .collect();
    let k: Rows = h.iter().map(|r| lin(r, &w.wk, Some(&w.bk))).collect();
    let v: Rows = h
        .iter()
        .map(|r| {
            let base = lin(r, &w.wv, Some(&w.bv));
            match &layer.lora {
                Some(l) => add(&base, &delta(r, &l.v_down, &l.v_up, l.scaling)),
                None => base,
            }
        })
        .collect();
    let proj = |a: &[f64]| lin(a, &w.wo, Some(&w.bo));
    let mut count = 0;
    let frame_keys = |f: usize| (f * t..(f + 1) * t).collect::<Vec<_>>();
    let all_keys: Vec<usize> = (0..n).collect();

    let mut attn: Rows = (0..n)
        .map(|i| {
            let keys = if scheme == AttentionScheme::VideoLevel { all_keys.clone() } else { frame_keys(i / t) };
            proj(&attend_one(&q[i], &keys, &k, &v, layer.heads, &mut count))
        })
        .collect();
    if matches!(scheme, AttentionScheme::IvFusion | AttentionScheme::IvFusionNoAdapter) {
        for f in 0..frames {
            let i = f * t;
            let c1 = attn[i].clone();
            let c2 = proj(&attend_one(&q[i], &all_keys, &k, &v, layer.heads, &mut count));
            attn[i] = match (scheme, &layer.adapter) {
                (AttentionScheme::IvFusion, Some(a)) => {
                    let mid: Vec<f64> = right_mul(&c1, &a.down).into_iter().map(gelu).collect();
                    add(&c2, &right_mul(&mid, &a.up))
                }
                (AttentionScheme::IvFusion, None) => c2,
                _ => c1.iter().zip(&c2).map(|(a, b)| 0.5 * (a + b)).collect(),
            };
        }
    }
    let out = (0..n)
        .map(|i| {
            let x2 = add(&x[i], &attn[i]);
            let h2 = layer_norm(&x2, &w.ln2_gamma, &w.ln2_beta);
            let hid: Vec<f64> = lin(&h2, &w.fc_w, Some(&w.fc_b)).into_iter().map(gelu).collect();
            add(&x2, &lin(&hid, &w.proj_w, Some(&w.proj_b)))
        })
        .collect();
    (out, count)
}

/// Fine-grained similarity by enumeration; inputs `[B][F][E]`.
pub fn fine_grained(t: &[Rows], v: &[Rows]) -> Rows {
    t.iter()
        .map(|ti| {
            v.iter()
                .map(|vj| {
                    let best_frame: f64 = ti
                        .iter()
                        .map(|c| vj.iter().map(|fr| dot(c, fr)).fold(f64::NEG_INFINITY, f64::max))
                        .sum::<f64>()
                        / ti.len() as f64;
                    let best_caption: f64 = vj
                        .iter()
                        .map(|fr| ti.iter().map(|c| dot(c, fr)).fold(f64::NEG_INFINITY, f64::max))
                        .sum::<f64>()
                        / vj.len() as f64;
                    0.5 * (best_frame + best_caption)
                })
                .collect()
        })
        .collect()
}

pub fn paired(t: &[Rows], v: &[Rows]) -> Rows {
    t.iter()
        .map(|ti| v.iter().map(|vj| ti.iter().zip(vj).map(|(a, b)| dot(a, b)).sum::<f64>() / ti.len() as f64).collect())
        .collect()
}

/// Rank of the matching candidate after a stable sort by descending score.
pub fn sort_ranks(sim: &Rows, text_queries: bool) -> Vec<usize> {
    let n = sim.len();
    let score = |q: usize, c: usize| if text_queries { sim[q][c] } else { sim[c][q] };
    (0..n)
        .map(|q| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| score(q, b).partial_cmp(&score(q, a)).unwrap());
            order.iter().position(|&c| c == q).unwrap() + 1
        })
        .collect()
}

/// Recall at 1/5/10 (percent) and mean rank.
pub fn metrics(ranks: &[usize]) -> [f64; 4] {
    let n = ranks.len() as f64;
    let at = |k| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    [at(1), at(5), at(10), ranks.iter().sum::<usize>() as f64 / n]
}

/// Dual softmax by direct summation.
pub fn dsl(sim: &Rows, temperature: f64, text_queries: bool) -> Rows {
    let n_t = sim.len();
    let n_v = sim[0].len();
    (0..n_t)
        .map(|i| {
            (0..n_v)
                .map(|j| {
                    let z: f64 = if text_queries {
                        (0..n_t).map(|a| (sim[a][j] / temperature).exp()).sum()
                    } else {
                        (0..n_v).map(|b| (sim[i][b] / temperature).exp()).sum()
                    };
                    sim[i][j] * (sim[i][j] / temperature).exp() / z
                })
                .collect()
        })
        .collect()
}
