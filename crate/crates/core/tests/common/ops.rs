//! Randomized inputs for every differentiable graph op.

use std::sync::Arc;

use super::Builder;
use cxrcast::autodiff::{AttnSegment, Graph, Reduction, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.5..1.5))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

pub struct Case {
    pub name: &'static str,
    pub trials: usize,
    pub make: fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Vec<usize>, Box<Builder<'static>>),
}

/// Randomized finite-difference cases, one entry per differentiable op.
pub fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "matmul",
            trials: 8,
            make: |r| {
                let (m, k, n) = (r.random_range(1..5), r.random_range(1..6), r.random_range(1..5));
                (vec![randn(r, &[m, k]), randn(r, &[k, n])], vec![0, 1], Box::new(|g, v| g.matmul(v[0], v[1])))
            },
        },
        Case {
            name: "linear",
            trials: 8,
            make: |r| {
                let (m, k, n) = (r.random_range(1..5), r.random_range(1..6), r.random_range(1..5));
                (
                    vec![randn(r, &[m, k]), randn(r, &[k, n]), randn(r, &[n])],
                    vec![0, 1, 2],
                    Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
                )
            },
        },
        Case {
            name: "add/sub/mul/scale",
            trials: 8,
            make: |r| {
                let s = [r.random_range(1..4), r.random_range(1..5)];
                (vec![randn(r, &s), randn(r, &s)], vec![0, 1], Box::new(|g, v| {
                    let a = g.add(v[0], v[1])?;
                    let b = g.sub(a, v[1])?;
                    let c = g.mul(b, v[1])?;
                    g.scale(c, -0.7)
                }))
            },
        },
        Case {
            name: "softmax",
            trials: 8,
            make: |r| {
                let s = [r.random_range(1..4), r.random_range(2..6)];
                (vec![randn(r, &s)], vec![0], Box::new(|g, v| g.softmax(v[0])))
            },
        },
        Case {
            name: "layer_norm",
            trials: 8,
            make: |r| {
                let c = r.random_range(2..7);
                let s = [r.random_range(1..4), c];
                (
                    vec![randn(r, &s), randn(r, &[c]), randn(r, &[c])],
                    vec![0, 1, 2],
                    Box::new(|g, v| g.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)),
                )
            },
        },
        Case {
            name: "gelu",
            trials: 8,
            make: |r| {
                let s = [r.random_range(1..4), r.random_range(1..6)];
                (vec![randn(r, &s)], vec![0], Box::new(|g, v| g.gelu(v[0])))
            },
        },
        Case {
            name: "sigmoid",
            trials: 6,
            make: |r| {
                let s = [r.random_range(1..4), r.random_range(1..6)];
                (vec![randn(r, &s)], vec![0], Box::new(|g, v| g.sigmoid(v[0])))
            },
        },
        Case {
            name: "concat",
            trials: 6,
            make: |r| {
                let (rows, c1, c2) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
                (
                    vec![randn(r, &[rows, c1]), randn(r, &[rows, c2])],
                    vec![0, 1],
                    Box::new(|g, v| g.concat(&[v[0], v[1], v[0]])),
                )
            },
        },
        Case {
            name: "dropout",
            trials: 6,
            make: |r| {
                let s = [r.random_range(1..4), r.random_range(2..8)];
                let seed = r.random::<u64>();
                (
                    vec![randn(r, &s)],
                    vec![0],
                    Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        g.dropout(v[0], 0.3, &mut rng, true)
                    }),
                )
            },
        },
        Case {
            name: "causal self-attention (packed)",
            trials: 10,
            make: |r| {
                let heads = r.random_range(1..3);
                let d = heads * r.random_range(1..4);
                let (t1, t2) = (r.random_range(1..5), r.random_range(1..5));
                let rows = t1 + t2;
                let segs: Arc<[AttnSegment]> = vec![AttnSegment::square(0, t1), AttnSegment::square(t1, t2)].into();
                (
                    vec![randn(r, &[rows, d]), randn(r, &[rows, d]), randn(r, &[rows, d])],
                    vec![0, 1, 2],
                    Box::new(move |g: &mut Graph<f64>, v: &[Var]| g.attention(v[0], v[1], v[2], heads, true, segs.clone())),
                )
            },
        },
        Case {
            name: "offset cross-attention",
            trials: 6,
            make: |r| {
                let heads = 2;
                let d = 4;
                let tk = r.random_range(2..6);
                let off = r.random_range(0..tk);
                let tq = tk - off;
                let segs: Arc<[AttnSegment]> = vec![AttnSegment {
                    q_start: 0,
                    q_len: tq,
                    k_start: 0,
                    k_len: tk,
                    q_offset: off,
                }]
                .into();
                (
                    vec![randn(r, &[tq, d]), randn(r, &[tk, d]), randn(r, &[tk, d])],
                    vec![0, 1, 2],
                    Box::new(move |g: &mut Graph<f64>, v: &[Var]| g.attention(v[0], v[1], v[2], heads, true, segs.clone())),
                )
            },
        },
        Case {
            name: "mse",
            trials: 6,
            make: |r| {
                let s = [r.random_range(1..4), r.random_range(1..6)];
                (vec![randn(r, &s), randn(r, &s)], vec![0, 1], Box::new(|g, v| g.mse(v[0], v[1])))
            },
        },
        Case {
            name: "row-weighted squared error",
            trials: 6,
            make: |r| {
                let rows = r.random_range(1..5);
                let s = [rows, r.random_range(1..6)];
                let w: Vec<f64> = (0..rows).map(|_| r.random_range(0.0..1.0)).collect();
                (
                    vec![randn(r, &s), randn(r, &s)],
                    vec![0, 1],
                    Box::new(move |g: &mut Graph<f64>, v: &[Var]| g.sq_err(v[0], v[1], Reduction::RowWeighted(w.clone()))),
                )
            },
        },
        Case {
            name: "bce on probabilities",
            trials: 6,
            make: |r| {
                let s = [r.random_range(1..4), r.random_range(1..6)];
                (
                    vec![uniform(r, &s, 0.05, 0.95), uniform(r, &s, 0.0, 1.0)],
                    vec![0, 1],
                    Box::new(|g, v| g.bce(v[0], v[1], 1e-7, Reduction::Mean)),
                )
            },
        },
        Case {
            name: "bce with logits",
            trials: 6,
            make: |r| {
                let s = [r.random_range(1..4), r.random_range(1..6)];
                (
                    vec![randn(r, &s), uniform(r, &s, 0.0, 1.0)],
                    vec![0, 1],
                    Box::new(|g, v| g.bce_with_logits(v[0], v[1])),
                )
            },
        },
    ]
}

