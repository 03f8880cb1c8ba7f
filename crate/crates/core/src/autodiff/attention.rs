//! Multi-head attention kernel over packed sequences.
//!
//! Sequences of different lengths are packed row-wise into one matrix; each
//! [`AttnSegment`] says which query rows attend to which key rows. Heads are
//! strided column blocks of width `d / heads`, so no per-head copies are made.

use crate::autodiff::real::{gemm, MatMut, MatRef};
use crate::autodiff::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    /// Position of the segment's first query row within its key rows.
    pub q_offset: usize,
}

impl AttnSegment {
    /// Self-attention over rows `start..start + len`.
    pub fn square(start: usize, len: usize) -> Self {
        AttnSegment {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
            q_offset: 0,
        }
    }

    /// Number of keys visible to query row `i`.
    fn visible(&self, i: usize, causal: bool) -> usize {
        if causal {
            (self.q_offset + i + 1).min(self.k_len)
        } else {
            self.k_len
        }
    }
}

pub(crate) fn validate(segments: &[AttnSegment], rq: usize, rk: usize, causal: bool) -> Result<()> {
    for s in segments {
        if s.q_start + s.q_len > rq || s.k_start + s.k_len > rk || s.k_len == 0 {
            return Err(Error::Usage(format!(
                "attention segment {s:?} out of range for {rq} query rows and {rk} key rows"
            )));
        }
        if causal && s.q_offset + s.q_len > s.k_len {
            return Err(Error::Usage(format!(
                "causal attention segment {s:?} has queries past its last key"
            )));
        }
    }
    Ok(())
}

fn softmax_prefix<F: Real>(row: &mut [F], visible: usize) {
    let (live, masked) = row.split_at_mut(visible);
    crate::autodiff::graph::softmax_in_place(live);
    masked.fill(F::zero());
}

/// Returns the output `[rq, d]` and the attention probabilities of every
/// segment and head, concatenated.
#[allow(clippy::too_many_arguments)]
pub(crate) fn forward<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    rq: usize,
    d: usize,
    heads: usize,
    causal: bool,
    segments: &[AttnSegment],
) -> (Vec<F>, Vec<F>) {
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let mut out = vec![F::zero(); rq * d];
    let total: usize = segments.iter().map(|s| s.q_len * s.k_len).sum::<usize>() * heads;
    let mut probs = vec![F::zero(); total];
    let mut off = 0;
    for s in segments {
        let block = s.q_len * s.k_len;
        for h in 0..heads {
            let p = &mut probs[off..off + block];
            gemm(
                MatRef::block(q, s.q_start * d + h * dh, s.q_len, dh, d),
                MatRef::block(k, s.k_start * d + h * dh, s.k_len, dh, d).t(),
                F::zero(),
                MatMut::row_major(p, s.q_len, s.k_len),
            );
            for (i, row) in p.chunks_mut(s.k_len).enumerate() {
                for x in row.iter_mut() {
                    *x *= scale;
                }
                softmax_prefix(row, s.visible(i, causal));
            }
            gemm(
                MatRef::row_major(p, s.q_len, s.k_len),
                MatRef::block(v, s.k_start * d + h * dh, s.k_len, dh, d),
                F::zero(),
                MatMut::block(&mut out, s.q_start * d + h * dh, s.q_len, dh, d),
            );
            off += block;
        }
    }
    (out, probs)
}

/// Gradients with respect to `q`, `k` and `v`, for those requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    dout: &[F],
    probs: &[F],
    rq: usize,
    rk: usize,
    d: usize,
    heads: usize,
    causal: bool,
    segments: &[AttnSegment],
    wanted: [bool; 3],
) -> [Option<Vec<F>>; 3] {
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let mut dq = wanted[0].then(|| vec![F::zero(); rq * d]);
    let mut dk = wanted[1].then(|| vec![F::zero(); rk * d]);
    let mut dv = wanted[2].then(|| vec![F::zero(); rk * d]);
    let mut off = 0;
    for s in segments {
        let block = s.q_len * s.k_len;
        let mut ds = vec![F::zero(); block];
        for h in 0..heads {
            let p = &probs[off..off + block];
            let qo = s.q_start * d + h * dh;
            let ko = s.k_start * d + h * dh;
            let dout_h = MatRef::block(dout, qo, s.q_len, dh, d);
            if let Some(dv) = dv.as_mut() {
                gemm(
                    MatRef::row_major(p, s.q_len, s.k_len).t(),
                    dout_h,
                    F::one(),
                    MatMut::block(dv, ko, s.k_len, dh, d),
                );
            }
            if dq.is_some() || dk.is_some() {
                // dP = dO V^T, then dS = P * (dP - rowsum(P * dP)) * scale
                gemm(
                    dout_h,
                    MatRef::block(v, ko, s.k_len, dh, d).t(),
                    F::zero(),
                    MatMut::row_major(&mut ds, s.q_len, s.k_len),
                );
                for (i, (drow, prow)) in ds.chunks_mut(s.k_len).zip(p.chunks(s.k_len)).enumerate() {
                    let vis = s.visible(i, causal);
                    let dot: F = drow[..vis].iter().zip(&prow[..vis]).map(|(&a, &b)| a * b).sum();
                    for j in 0..s.k_len {
                        drow[j] = if j < vis { prow[j] * (drow[j] - dot) * scale } else { F::zero() };
                    }
                }
                if let Some(dq) = dq.as_mut() {
                    gemm(
                        MatRef::row_major(&ds, s.q_len, s.k_len),
                        MatRef::block(k, ko, s.k_len, dh, d),
                        F::one(),
                        MatMut::block(dq, qo, s.q_len, dh, d),
                    );
                }
                if let Some(dk) = dk.as_mut() {
                    gemm(
                        MatRef::row_major(&ds, s.q_len, s.k_len).t(),
                        MatRef::block(q, qo, s.q_len, dh, d),
                        F::one(),
                        MatMut::block(dk, ko, s.k_len, dh, d),
                    );
                }
            }
            off += block;
        }
    }
    [dq, dk, dv]
}
