//! Shared fixtures and brute-force loss oracles for integration tests.
#![allow(dead_code)]

use kdlab::init::init_random;
use kdlab::model::{FeatureTrace, LayerTrace};
use kdlab::{HeadKind, ModelConfig, Tape, Tensor, TransformerModel, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
}

/// Row-stochastic tensor: softmax over the last axis of random logits.
pub fn stochastic(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = *shape.last().unwrap();
    let mut t = uniform(rng, shape, 2.0);
    for row in t.data_mut().chunks_mut(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        row.iter_mut().for_each(|x| *x = (*x - m).exp() / z);
    }
    t
}

pub fn tiny_config(layers: usize, d: usize, heads: usize) -> ModelConfig {
    ModelConfig::new(layers, d, heads)
        .with_vocab(24, 8)
        .with_labels(HeadKind::Classification(3))
}

pub fn random_model(config: ModelConfig, seed: u64, std: f64) -> TransformerModel {
    let mut m = TransformerModel::new(config).unwrap();
    init_random(&mut m, seed, std).unwrap();
    m
}

pub fn random_batch(rng: &mut ChaCha8Rng, batch: usize, n: usize, vocab: usize) -> Vec<Vec<u32>> {
    (0..batch)
        .map(|_| (0..n).map(|_| rng.gen_range(1..vocab as u32)).collect())
        .collect()
}

/// Raw per-layer features for a synthetic trace.
#[derive(Clone, Debug)]
pub struct RawTrace {
    /// `[B, n, d]` per hidden state, index 0 = embeddings.
    pub hidden: Vec<Tensor>,
    /// `[B, H, n, n]` per layer (row-stochastic).
    pub attention: Vec<Tensor>,
    /// `[B, H, n, d_k]` per layer.
    pub query: Vec<Tensor>,
    pub key: Vec<Tensor>,
    pub value: Vec<Tensor>,
    /// `[B, C]`
    pub logits: Tensor,
}

impl RawTrace {
    pub fn random(rng: &mut ChaCha8Rng, layers: usize, b: usize, n: usize, d: usize, h: usize, c: usize) -> Self {
        let dk = d / h;
        RawTrace {
            hidden: (0..=layers).map(|_| uniform(rng, &[b, n, d], 1.0)).collect(),
            attention: (0..layers).map(|_| stochastic(rng, &[b, h, n, n])).collect(),
            query: (0..layers).map(|_| uniform(rng, &[b, h, n, dk], 1.0)).collect(),
            key: (0..layers).map(|_| uniform(rng, &[b, h, n, dk], 1.0)).collect(),
            value: (0..layers).map(|_| uniform(rng, &[b, h, n, dk], 1.0)).collect(),
            logits: uniform(rng, &[b, c], 2.0),
        }
    }

    pub fn layers(&self) -> usize {
        self.attention.len()
    }

    /// All tensors in a fixed order, for gradient checks.
    pub fn flatten(&self) -> Vec<Tensor> {
        let mut v = self.hidden.clone();
        v.extend(self.attention.iter().cloned());
        v.extend(self.query.iter().cloned());
        v.extend(self.key.iter().cloned());
        v.extend(self.value.iter().cloned());
        v.push(self.logits.clone());
        v
    }

    /// Builds a trace from variables laid out as by [`RawTrace::flatten`].
    pub fn trace_from<'t>(layers: usize, vars: &[Var<'t>]) -> FeatureTrace<'t> {
        let l = layers;
        let hidden = &vars[..=l];
        let attention = &vars[l + 1..2 * l + 1];
        let query = &vars[2 * l + 1..3 * l + 1];
        let key = &vars[3 * l + 1..4 * l + 1];
        let value = &vars[4 * l + 1..5 * l + 1];
        FeatureTrace {
            embeddings: hidden[0],
            layers: (0..l)
                .map(|i| LayerTrace {
                    attention: attention[i],
                    hidden: hidden[i + 1],
                    query: query[i],
                    key: key[i],
                    value: value[i],
                })
                .collect(),
            pooled: vars[5 * l + 1],
            logits: vars[5 * l + 1],
            regression: false,
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> FeatureTrace<'t> {
        let vars: Vec<Var<'t>> = self.flatten().into_iter().map(|t| tape.leaf(t, trainable)).collect();
        Self::trace_from(self.layers(), &vars)
    }
}

// ---- brute-force oracles: explicit loops over batch, heads, rows ----

fn at4(t: &Tensor, i: usize, j: usize, k: usize, l: usize) -> f64 {
    t.at(&[i, j, k, l])
}

pub fn attention_mse_oracle(teacher: &Tensor, student: &Tensor) -> f64 {
    let (b, ht, n) = (teacher.shape()[0], teacher.shape()[1], teacher.shape()[2]);
    let hs = student.shape()[1];
    let mut acc = 0.0;
    for x in 0..b {
        for i in 0..n {
            for j in 0..n {
                let st: f64 = (0..hs).map(|h| at4(student, x, h, i, j)).sum();
                let tt: f64 = (0..ht).map(|h| at4(teacher, x, h, i, j)).sum();
                acc += (st - tt).powi(2);
            }
        }
    }
    acc / (b * n * n) as f64
}

pub fn attention_ce_oracle(teacher: &Tensor, student: &Tensor) -> f64 {
    let (b, ht, n) = (teacher.shape()[0], teacher.shape()[1], teacher.shape()[2]);
    let hs = student.shape()[1];
    let mut acc = 0.0;
    for x in 0..b {
        for i in 0..n {
            for j in 0..n {
                let s: f64 = (0..hs).map(|h| at4(student, x, h, i, j)).sum::<f64>() / hs as f64;
                let t: f64 = (0..ht).map(|h| at4(teacher, x, h, i, j)).sum::<f64>() / ht as f64;
                acc -= t * s.max(1e-12).ln();
            }
        }
    }
    acc / (b * n) as f64
}

/// `[B, n, d]` times `[d, e]`.
pub fn project_oracle(h: &Tensor, w: &Tensor) -> Tensor {
    let (b, n, d) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    let e = w.shape()[1];
    Tensor::from_fn([b, n, e], |idx| {
        let (x, rest) = (idx / (n * e), idx % (n * e));
        let (i, k) = (rest / e, rest % e);
        (0..d).map(|j| h.at(&[x, i, j]) * w.at(&[j, k])).sum()
    })
}

pub fn mmd_oracle(t1: &Tensor, t2: &Tensor, s1: &Tensor, s2: &Tensor) -> f64 {
    let (b, n) = (t1.shape()[0], t1.shape()[1]);
    let (dt, ds) = (t1.shape()[2], s1.shape()[2]);
    let mut acc = 0.0;
    for x in 0..b {
        for i in 0..n {
            for j in 0..n {
                let gt: f64 = (0..dt).map(|k| t1.at(&[x, i, k]) * t2.at(&[x, j, k])).sum();
                let gs: f64 = (0..ds).map(|k| s1.at(&[x, i, k]) * s2.at(&[x, j, k])).sum();
                acc += (gs - gt).powi(2);
            }
        }
    }
    acc / (b * n * n) as f64
}

/// Teacher states must already be projected to the student width.
pub fn gram_oracle(t1: &Tensor, t2: &Tensor, s1: &Tensor, s2: &Tensor) -> f64 {
    let (b, n, d) = (s1.shape()[0], s1.shape()[1], s1.shape()[2]);
    let mut acc = 0.0;
    for x in 0..b {
        for p in 0..d {
            for q in 0..d {
                let gt: f64 = (0..n).map(|i| t1.at(&[x, i, p]) * t2.at(&[x, i, q])).sum();
                let gs: f64 = (0..n).map(|i| s1.at(&[x, i, p]) * s2.at(&[x, i, q])).sum();
                acc += (gs - gt).powi(2);
            }
        }
    }
    acc / (b * d * d) as f64
}

fn relation_rows(x: &Tensor, b: usize, h: usize) -> Vec<Vec<f64>> {
    let (n, dk) = (x.shape()[2], x.shape()[3]);
    (0..n)
        .map(|i| {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..dk).map(|k| at4(x, b, h, i, k) * at4(x, b, h, j, k)).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
            scores.iter().map(|s| s - lse).collect()
        })
        .collect()
}

/// Mean over batch, heads and rows of `KL(R_t ‖ R_s)`, `R = softmax(X·Xᵀ/√d_k)`.
pub fn relation_oracle(teacher: &Tensor, student: &Tensor) -> f64 {
    let (b, h, n) = (teacher.shape()[0], teacher.shape()[1], teacher.shape()[2]);
    let mut acc = 0.0;
    for x in 0..b {
        for head in 0..h {
            let lt = relation_rows(teacher, x, head);
            let ls = relation_rows(student, x, head);
            for i in 0..n {
                for j in 0..n {
                    acc += lt[i][j].exp() * (lt[i][j] - ls[i][j]);
                }
            }
        }
    }
    acc / (b * h * n) as f64
}

/// Per-head scaled dot-product attention written as plain loops.
/// Returns `(output [n, d], attention [H, n, n])` for one sequence.
#[allow(clippy::too_many_arguments)]
pub fn attention_oracle(
    x: &Tensor,
    wq: &Tensor,
    bq: &Tensor,
    wk: &Tensor,
    bk: &Tensor,
    wv: &Tensor,
    bv: &Tensor,
    wo: &Tensor,
    bo: &Tensor,
    heads: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let dk = d / heads;
    let lin = |w: &Tensor, b: &Tensor| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                (0..d)
                    .map(|o| b.data()[o] + (0..d).map(|j| x.at(&[i, j]) * w.at(&[j, o])).sum::<f64>())
                    .collect()
            })
            .collect()
    };
    let (q, k, v) = (lin(wq, bq), lin(wk, bk), lin(wv, bv));
    let mut context = vec![vec![0.0; d]; n];
    let mut attn = vec![vec![vec![0.0; n]; n]; heads];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for j in 0..n {
                attn[h][i][j] = (scores[j] - m).exp() / z;
            }
            for c in cols.clone() {
                context[i][c] = (0..n).map(|j| attn[h][i][j] * v[j][c]).sum();
            }
        }
    }
    let out = (0..n)
        .map(|i| {
            (0..d)
                .map(|o| bo.data()[o] + (0..d).map(|j| context[i][j] * wo.at(&[j, o])).sum::<f64>())
                .collect()
        })
        .collect();
    (out, attn)
}
