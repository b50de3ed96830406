//! Shared fixtures and independent reference implementations.
#![allow(dead_code, clippy::needless_range_loop)]

use eegfuse_core::encoders::{gat_layer, gcn_layer};
use eegfuse_core::fusion::{classify, cross_domain_attention, CdaVars, CdaWeights};
use eegfuse_core::graph::{ChannelGraph, GraphBatch};
use eegfuse_core::nn::{bilstm, gradient_check, linear, lstm, LstmVars, BN_EPS};
use eegfuse_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random symmetric graph on `c` nodes with edge probability `p`.
pub fn random_graph(rng: &mut ChaCha8Rng, c: usize, p: f64) -> ChannelGraph {
    let mut a = Tensor::zeros(&[c, c]);
    for i in 0..c {
        for j in i + 1..c {
            if rng.random_bool(p) {
                a.set2(i, j, 1.0);
                a.set2(j, i, 1.0);
            }
        }
    }
    ChannelGraph::from_adjacency(a, Tensor::zeros(&[c, 1]))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at2(i, p) * b.at2(p, j);
            }
            out.set2(i, j, s);
        }
    }
    out
}

/// `ReLU(D̃^{-1/2} (A + I) D̃^{-1/2} H W)` with dense matrices.
pub fn dense_gcn(graph: &ChannelGraph, h: &Tensor, w: &Tensor) -> Tensor {
    let c = graph.n_nodes();
    let mut a_hat = graph.adjacency.clone();
    for i in 0..c {
        a_hat.set2(i, i, 1.0);
    }
    let d: Vec<f64> = (0..c).map(|i| a_hat.row(i).iter().sum()).collect();
    let mut d_inv_sqrt = Tensor::zeros(&[c, c]);
    for i in 0..c {
        d_inv_sqrt.set2(i, i, 1.0 / d[i].sqrt());
    }
    let norm = matmul(&matmul(&d_inv_sqrt, &a_hat), &d_inv_sqrt);
    matmul(&matmul(&norm, h), w).map(|v| v.max(0.0))
}

/// GAT layer node by node: `z = hW`, scores over `N_i ∪ {i}`, softmax,
/// weighted sum, ReLU. `a = [a_src; a_dst]`. Returns outputs and attention.
pub fn brute_gat(graph: &ChannelGraph, h: &Tensor, w: &Tensor, a: &[f64]) -> (Tensor, Tensor) {
    let c = graph.n_nodes();
    let f = w.dim(1);
    let z = matmul(h, w);
    let mut out = Tensor::zeros(&[c, f]);
    let mut att = Tensor::zeros(&[c, c]);
    for i in 0..c {
        let hood: Vec<usize> = (0..c).filter(|&j| j == i || graph.adjacency.at2(i, j) != 0.0).collect();
        let score = |j: usize| {
            let s: f64 = (0..f).map(|k| a[k] * z.at2(i, k) + a[f + k] * z.at2(j, k)).sum();
            if s > 0.0 {
                s
            } else {
                0.2 * s
            }
        };
        let scores: Vec<f64> = hood.iter().map(|&j| score(j)).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (&j, e) in hood.iter().zip(&exps) {
            att.set2(i, j, e / total);
            for k in 0..f {
                out.set2(i, k, out.at2(i, k) + e / total * z.at2(j, k));
            }
        }
    }
    (out.map(|v| v.max(0.0)), att)
}

/// Multi-head attention written out head by head on `[rows × d]` inputs.
/// Returns the output `[S_q × d]` and attention `[H × S_q × S_kv]`.
pub fn dense_attention(queries: &Tensor, context: &Tensor, w: &CdaWeights, heads: usize) -> (Tensor, Tensor) {
    let d = queries.dim(1);
    let dh = d / heads;
    let (sq, skv) = (queries.dim(0), context.dim(0));
    let q = matmul(queries, &w.w_q);
    let k = matmul(context, &w.w_k);
    let v = matmul(context, &w.w_v);
    let mut concat = Tensor::zeros(&[sq, d]);
    let mut att = Tensor::zeros(&[heads * sq, skv]);
    for hd in 0..heads {
        let cols = hd * dh..(hd + 1) * dh;
        for i in 0..sq {
            let scores: Vec<f64> = (0..skv)
                .map(|j| cols.clone().map(|c| q.at2(i, c) * k.at2(j, c)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for j in 0..skv {
                let p = exps[j] / total;
                att.set2(hd * sq + i, j, p);
                for c in cols.clone() {
                    concat.set2(i, c, concat.at2(i, c) + p * v.at2(j, c));
                }
            }
        }
    }
    let att = att.reshape(&[heads, sq, skv]).unwrap();
    (matmul(&concat, &w.w_o), att)
}

pub fn random_cda_weights(rng: &mut ChaCha8Rng, d: usize) -> CdaWeights {
    let s = 1.0 / (d as f64).sqrt();
    CdaWeights {
        w_q: randn(rng, &[d, d], s),
        w_k: randn(rng, &[d, d], s),
        w_v: randn(rng, &[d, d], s),
        w_o: randn(rng, &[d, d], s),
    }
}

/// A differentiable operation checked against finite differences.
pub struct GradCase {
    pub name: &'static str,
    pub recurrent: bool,
    pub run: fn(u64) -> Result<Vec<f64>>,
}

impl GradCase {
    pub fn tolerance(&self) -> f64 {
        if self.recurrent {
            1e-4
        } else {
            1e-6
        }
    }
}

pub const FD_STEP: f64 = 1e-5;

fn lstm_inputs(r: &mut ChaCha8Rng, d: usize, h: usize) -> [Tensor; 3] {
    [randn(r, &[d, 4 * h], 0.5), randn(r, &[h, 4 * h], 0.5), randn(r, &[4 * h], 0.5)]
}

pub fn gradient_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "linear",
            recurrent: false,
            run: |seed| {
                let mut r = rng(seed);
                let inputs = [randn(&mut r, &[3, 4], 1.0), randn(&mut r, &[4, 5], 1.0), randn(&mut r, &[5], 1.0)];
                gradient_check(&inputs, FD_STEP, |t, v| linear(t, v[0], v[1], Some(v[2])))
            },
        },
        GradCase {
            name: "conv1d",
            recurrent: false,
            run: |seed| {
                let mut r = rng(seed);
                let stride = 1 + (seed as usize % 2);
                let inputs = [randn(&mut r, &[2, 3, 11], 1.0), randn(&mut r, &[4, 3, 3], 1.0), randn(&mut r, &[4], 1.0)];
                gradient_check(&inputs, FD_STEP, |t, v| t.conv1d(v[0], v[1], Some(v[2]), stride))
            },
        },
        GradCase {
            name: "batch_norm",
            recurrent: false,
            run: |seed| {
                let mut r = rng(seed);
                let inputs = [randn(&mut r, &[3, 2, 5], 2.0), randn(&mut r, &[2], 1.0), randn(&mut r, &[2], 1.0)];
                let mut errs = gradient_check(&inputs, FD_STEP, |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], BN_EPS)?.0))?;
                let (mean, var) = ([0.3, -0.2], [1.5, 0.7]);
                errs.extend(gradient_check(&inputs, FD_STEP, |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, BN_EPS))?);
                Ok(errs)
            },
        },
        GradCase {
            name: "lstm",
            recurrent: true,
            run: |seed| {
                let mut r = rng(seed);
                let [a, b, c] = lstm_inputs(&mut r, 3, 4);
                let inputs = [randn(&mut r, &[2, 5, 3], 1.0), a, b, c, randn(&mut r, &[2, 4], 0.5), randn(&mut r, &[2, 4], 0.5)];
                gradient_check(&inputs, FD_STEP, |t, v| {
                    lstm(t, v[0], &LstmVars { w_ih: v[1], w_hh: v[2], bias: v[3] }, Some(v[4]), Some(v[5]))
                })
            },
        },
        GradCase {
            name: "bilstm",
            recurrent: true,
            run: |seed| {
                let mut r = rng(seed);
                let [a, b, c] = lstm_inputs(&mut r, 3, 2);
                let [d, e, f] = lstm_inputs(&mut r, 3, 2);
                let inputs = [randn(&mut r, &[2, 4, 3], 1.0), a, b, c, d, e, f];
                gradient_check(&inputs, FD_STEP, |t, v| {
                    let fwd = LstmVars { w_ih: v[1], w_hh: v[2], bias: v[3] };
                    let bwd = LstmVars { w_ih: v[4], w_hh: v[5], bias: v[6] };
                    bilstm(t, v[0], &fwd, &bwd)
                })
            },
        },
        GradCase {
            name: "softmax",
            recurrent: false,
            run: |seed| {
                let mut r = rng(seed);
                let inputs = [randn(&mut r, &[3, 5], 2.0)];
                let mask: Vec<bool> = (0..15).map(|i| i % 5 == i / 5 || r.random_bool(0.6)).collect();
                let mut errs = gradient_check(&inputs, FD_STEP, |t, v| t.softmax(v[0], None))?;
                errs.extend(gradient_check(&inputs, FD_STEP, |t, v| t.softmax(v[0], Some(&mask)))?);
                Ok(errs)
            },
        },
        GradCase {
            name: "cross_entropy",
            recurrent: false,
            run: |seed| {
                let mut r = rng(seed);
                let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..3)).collect();
                let inputs = [randn(&mut r, &[4, 3], 2.0)];
                gradient_check(&inputs, FD_STEP, |t, v| t.cross_entropy(v[0], &labels))
            },
        },
        GradCase {
            name: "gcn_layer",
            recurrent: false,
            run: |seed| {
                let mut r = rng(seed);
                let graphs = [random_graph(&mut r, 6, 0.4), random_graph(&mut r, 6, 0.4)];
                let coeffs = GraphBatch::from_graphs(&graphs)?.coefficients;
                let inputs = [randn(&mut r, &[2, 6, 3], 1.0), randn(&mut r, &[3, 4], 1.0)];
                gradient_check(&inputs, FD_STEP, |t, v| {
                    let c = t.constant(coeffs.clone());
                    gcn_layer(t, c, v[0], v[1])
                })
            },
        },
        GradCase {
            name: "gat_layer",
            recurrent: false,
            run: |seed| {
                let mut r = rng(seed);
                let graphs = [random_graph(&mut r, 6, 0.4), random_graph(&mut r, 6, 0.4)];
                let mask = GraphBatch::from_graphs(&graphs)?.mask;
                let inputs = [
                    randn(&mut r, &[2, 6, 3], 1.0),
                    randn(&mut r, &[3, 4], 1.0),
                    randn(&mut r, &[4, 1], 1.0),
                    randn(&mut r, &[4, 1], 1.0),
                ];
                gradient_check(&inputs, FD_STEP, |t, v| gat_layer(t, &mask, v[0], v[1], v[2], v[3]))
            },
        },
        GradCase {
            name: "cross_domain_attention",
            recurrent: false,
            run: |seed| {
                let mut r = rng(seed);
                let s = 0.5;
                let inputs = [
                    randn(&mut r, &[2, 5, 8], 1.0),
                    randn(&mut r, &[2, 4, 8], 1.0),
                    randn(&mut r, &[8, 8], s),
                    randn(&mut r, &[8, 8], s),
                    randn(&mut r, &[8, 8], s),
                    randn(&mut r, &[8, 8], s),
                ];
                gradient_check(&inputs, FD_STEP, |t, v| {
                    let w = CdaVars { w_q: v[2], w_k: v[3], w_v: v[4], w_o: v[5] };
                    Ok(cross_domain_attention(t, v[0], v[1], &w, 2)?.x_cm)
                })
            },
        },
        GradCase {
            name: "classifier",
            recurrent: false,
            run: |seed| {
                let mut r = rng(seed);
                let inputs = [
                    randn(&mut r, &[3, 12], 1.0),
                    randn(&mut r, &[12, 64], 0.3),
                    randn(&mut r, &[64], 0.3),
                    randn(&mut r, &[64, 2], 0.3),
                    randn(&mut r, &[2], 0.3),
                ];
                gradient_check(&inputs, FD_STEP, |t, v| classify(t, v[0], [v[1], v[2], v[3], v[4]]))
            },
        },
    ]
}

/// Runs every gradient case over `seeds` and returns `(name, worst error,
/// tolerance)` per case.
pub fn run_gradient_suite(seeds: std::ops::Range<u64>) -> Vec<(&'static str, f64, f64)> {
    gradient_cases()
        .iter()
        .map(|case| {
            let worst = seeds
                .clone()
                .map(|s| (case.run)(s).expect(case.name).into_iter().fold(0.0, f64::max))
                .fold(0.0, f64::max);
            (case.name, worst, case.tolerance())
        })
        .collect()
}

pub fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

pub fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Tensor> = perm.iter().map(|&p| t.index0(p)).collect();
    Tensor::stack(&rows).unwrap()
}
